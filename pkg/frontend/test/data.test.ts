import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { PNG } from "pngjs";
import { describe, expect, it, vi } from "vitest";
import {
  PatchRecord,
  buildBatches,
  loadPatchArchive,
  preprocess,
  readPngRgb,
  splitBySurface,
} from "../src/data.js";
import { makeToyDataset } from "./helpers.js";

describe("preprocess", () => {
  it("maps 8-bit extremes into (-1, 1)", () => {
    const out = preprocess(new Uint8Array([0, 255, 127, 128]));
    expect(out[0]).toBeCloseTo(-0.99609375, 10);
    expect(out[1]).toBeCloseTo(0.99609375, 10);
    expect(out[2]).toBeLessThan(0); // 127 and 128 bracket the midpoint
    expect(out[3]).toBeGreaterThan(0);
  });
});

describe("buildBatches", () => {
  const ds = makeToyDataset(3, 4, 5, 1); // 12 keypoints, 5 patches each

  it("pairs two patches of the same keypoint, batch structure intact", () => {
    for (const batch of buildBatches(ds, 4, 0)) {
      expect(batch.anchors.length).toBe(batch.positives.length);
      for (let i = 0; i < batch.anchors.length; ++i) {
        expect(batch.anchors[i].keypointId).toBe(batch.positives[i].keypointId);
        expect(batch.anchors[i].imageId).not.toBe(batch.positives[i].imageId);
      }
    }
  });

  it("a batch of 2 keypoints gives each anchor exactly one negative", () => {
    const small = makeToyDataset(1, 2, 3, 2);
    const batches = [...buildBatches(small, 2, 0)];
    expect(batches.length).toBe(1);
    expect(batches[0].anchors.length).toBe(2);
  });

  it("covers every keypoint once per pass", () => {
    const seen = new Set<string>();
    for (const batch of buildBatches(ds, 5, 3)) {
      for (const a of batch.anchors) {
        expect(seen.has(a.keypointId)).toBe(false);
        seen.add(a.keypointId);
      }
    }
    // 12 keypoints in batches of 5 -> 5 + 5; the tail of 2 still trains.
    expect(seen.size).toBe(12);
  });

  it("is deterministic for a fixed seed", () => {
    const key = (b: { anchors: PatchRecord[]; positives: PatchRecord[] }) =>
      b.anchors.map((a, i) => `${a.keypointId}:${a.imageId}>${b.positives[i].imageId}`).join(),
      run = () => [...buildBatches(ds, 4, 123)].map(key).join("|");
    expect(run()).toBe(run());
    expect(run()).not.toBe(
      [...buildBatches(ds, 4, 124)].map(key).join("|"),
    );
  });

  it("samples unordered pairs uniformly (multinomial 3-sigma bound)", () => {
    // Two keypoints, the first with 12 patches: 66 unordered pairs; count
    // which pair buildBatches draws for it over 1e5 seeded passes.
    const ds12 = makeToyDataset(2, 1, 12, 3);
    const target = [...ds12.groups.keys()].sort()[0];
    const counts = new Map<string, number>();
    const draws = 100_000;
    for (let pass = 0; pass < draws; ++pass) {
      for (const batch of buildBatches(ds12, 2, pass)) {
        for (let i = 0; i < batch.anchors.length; ++i) {
          if (batch.anchors[i].keypointId !== target) continue;
          const pair = [batch.anchors[i].imageId, batch.positives[i].imageId]
            .sort()
            .join(",");
          counts.set(pair, (counts.get(pair) ?? 0) + 1);
        }
      }
    }
    expect(counts.size).toBe(66);
    const pExpect = 1 / 66;
    const sigma = Math.sqrt(draws * pExpect * (1 - pExpect));
    for (const c of counts.values()) {
      expect(Math.abs(c - draws * pExpect)).toBeLessThan(3.5 * sigma);
    }
  });

  it("rejects batchKeypoints < 2", () => {
    expect(() => [...buildBatches(ds, 1, 0)]).toThrow(/>= 2/);
  });
});

describe("splitBySurface", () => {
  it("keeps train and validation surfaces disjoint", () => {
    const ds = makeToyDataset(8, 3, 4, 5);
    const { train, val } = splitBySurface(ds, 0.25, 0);
    expect(val.surfaces.length).toBe(2);
    expect(train.surfaces.length).toBe(6);
    for (const s of val.surfaces) expect(train.surfaces).not.toContain(s);
    expect(train.groups.size + val.groups.size).toBe(ds.groups.size);
  });
});

describe("loadPatchArchive", () => {
  function writeArchive(dir: string, groups: Record<string, number>): void {
    const lines: string[] = [];
    for (const [kpId, nViews] of Object.entries(groups)) {
      for (let v = 0; v < nViews; ++v) {
        const imageId = `s000_v${v.toString().padStart(2, "0")}`;
        const rel = path.join("s000", kpId, `${imageId}.png`);
        const png = new PNG({ width: 64, height: 64 });
        for (let i = 0; i < 64 * 64; ++i) {
          png.data[i * 4] = (i + v) % 256;
          png.data[i * 4 + 1] = (i + v) % 256;
          png.data[i * 4 + 2] = (i + v) % 256;
          png.data[i * 4 + 3] = 255;
        }
        fs.mkdirSync(path.dirname(path.join(dir, rel)), { recursive: true });
        fs.writeFileSync(path.join(dir, rel), PNG.sync.write(png));
        lines.push(
          JSON.stringify({
            surface_id: "s000",
            keypoint_id: kpId,
            image_id: imageId,
            x: 32.0,
            y: 32.0,
            path: rel,
          }),
        );
      }
    }
    fs.writeFileSync(path.join(dir, "manifest.jsonl"), lines.join("\n") + "\n");
  }

  it("round-trips pixels and drops single-patch keypoints with a warning", () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), "archive-"));
    writeArchive(dir, { kp00000: 3, kp00001: 1, kp00002: 2 });
    const warn = vi.spyOn(console, "warn").mockImplementation(() => {});
    const ds = loadPatchArchive(dir);
    expect(warn).toHaveBeenCalledOnce();
    warn.mockRestore();
    expect(ds.groups.size).toBe(2);
    expect(ds.groups.get("s000/kp00000")!.length).toBe(3);
    const rec = ds.groups.get("s000/kp00002")![0];
    expect(rec.pixels.length).toBe(64 * 64 * 3);
    expect(rec.pixels[3]).toBe(1); // pixel i=1 of view 0, channel r
    fs.rmSync(dir, { recursive: true, force: true });
  });

  it("readPngRgb replicates grayscale PNGs into three channels", () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), "png-"));
    const png = new PNG({ width: 2, height: 1, colorType: 0 });
    png.data.set([10, 10, 10, 255, 200, 200, 200, 255]);
    const file = path.join(dir, "g.png");
    fs.writeFileSync(file, PNG.sync.write(png));
    expect([...readPngRgb(file)]).toEqual([10, 10, 10, 200, 200, 200]);
    fs.rmSync(dir, { recursive: true, force: true });
  });
});
