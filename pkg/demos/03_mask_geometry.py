"""Region masks from landmarks: padding, priority, and disjointness.

Renders a handful of synthetic faces, derives eyes/nose/mouth boxes from
their landmarks, and shows the two geometric guarantees the benchmark
relies on: the padded eye box never loses a landmark, and overlap
resolution (eyes > nose > mouth) leaves the three masks pairwise disjoint.
Writes nothing outside the chosen working directory.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from idinpaint import emask, synthfaces
from idinpaint.manifest import read_manifest, resolve

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
corpus = synthfaces.generate_corpus(work / "corpus", n_identities=3,
                                    per_identity=2, size=64, seed=4)
rows = read_manifest(corpus)
print(f"rendered {len(rows)} faces under {work}\n")

for row in rows[:3]:
    lm = emask.FaceLandmarks.load(resolve(corpus, row["landmark_path"]))
    raw = {r: emask.region_box(lm, r, (64, 64)) for r in emask.REGIONS}
    resolved = emask.boxes_for_image(lm, (64, 64))
    print(f"{row['image_path']}:")
    for box in resolved:
        r = raw[box.region]
        shrunk = "" if (r.x0, r.y0, r.x1, r.y1) == (box.x0, box.y0, box.x1, box.y1) \
            else f"  (clipped from {r.x0},{r.y0},{r.x1},{r.y1})"
        print(f"  {box.region:5s} x[{box.x0:2d},{box.x1:2d}) y[{box.y0:2d},{box.y1:2d})"
              f" area={box.area:4d}{shrunk}")
    rasters = [emask.rasterize(b, 64, 64) for b in resolved]
    pairs = [(a.region, b.region, int((ra & rb).sum()))
             for (a, ra), (b, rb) in
             [((resolved[i], rasters[i]), (resolved[j], rasters[j]))
              for i in range(3) for j in range(i + 1, 3)]]
    print(f"  pairwise overlap pixels: {pairs}")

masks = emask.build_dataset(corpus, work / "masks")
print(f"\nmask dataset written to {masks}")

union = np.zeros((64, 64), dtype=np.uint8)
row = read_manifest(masks)[0]
for key in ("eyes_mask", "nose_mask", "mouth_mask"):
    from idinpaint.manifest import load_mask

    m = load_mask(resolve(masks, row[key])).numpy().astype(np.uint8)
    union += m
print(f"first image: max mask multiplicity per pixel = {union.max()} (1 means disjoint)")
print(f"region pixel counts: eyes+nose+mouth = {int(union.sum())}")
