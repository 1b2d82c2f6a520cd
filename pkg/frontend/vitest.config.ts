import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    testTimeout: 180_000,
    hookTimeout: 180_000,
    // Training tests compete for the single CPU; run files sequentially.
    pool: "forks",
    poolOptions: { forks: { singleFork: true } },
  },
});
