#!/usr/bin/env python3
"""Regenerates the synthetic annotation fixtures.

Every coordinate is an even integer and every image side is 1000 or 2000
pixels, so boxes sit exactly on the 0-1000 location grid. Rater boxes are
spread symmetrically around a base box, which makes the fused box equal to
the base box with no rounding.

Usage: python3 fixtures/generate.py  (writes next to this script)
"""

import csv
import json
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent
ASSETS = HERE.parent / "crates" / "core" / "assets"
COLUMNS = ["image_id", "class_name", "rad_id", "x_min", "y_min", "x_max", "y_max", "width", "height", "split"]
SIDES = [(1000, 1000), (2000, 2000), (2000, 1000), (1000, 2000)]


def even(x):
    return int(x) // 2 * 2


def base_box(rng, w, h, cell):
    """Box inside one of four non-overlapping image quadrants."""
    qx, qy = cell % 2, cell // 2
    x0, y0 = qx * w // 2, qy * h // 2
    bw = even(rng.uniform(0.15, 0.35) * w)
    bh = even(rng.uniform(0.15, 0.35) * h)
    x1 = even(x0 + rng.uniform(0.05, 0.45) * (w // 2 - bw)) + 20
    y1 = even(y0 + rng.uniform(0.05, 0.45) * (h // 2 - bh)) + 20
    return [x1, y1, x1 + bw, y1 + bh]


def rater_boxes(base, raters):
    """Symmetric offsets: the per-coordinate mean is the base box."""
    if raters == 1:
        return [base]
    offsets = [-4, 0, 4] if raters == 3 else [-4, 4]
    return [[c + o for c in base] for o in offsets]


def rows_for(image_id, class_name, boxes, raters, w, h, split):
    rows = []
    for base in boxes:
        for r, box in enumerate(rater_boxes(base, raters)):
            rows.append([image_id, class_name, f"R{r + 1}", *box, w, h, split])
    return rows


def vindr(rng):
    classes = [d["class_name"] for d in json.loads((ASSETS / "definitions_vindr.json").read_text())]
    rows, counts = [], {"train": 0, "test": 0}
    for split, images, per_image in (("train", 30, 2), ("test", 16, 2)):
        for i in range(images):
            image_id = f"vd_{split}_{i:03d}"
            w, h = SIDES[i % len(SIDES)]
            picked = [classes[(i * per_image + k) % len(classes)] for k in range(per_image)]
            cells = rng.sample(range(4), 4)
            for k, cls in enumerate(picked):
                lesions = 2 if (i + k) % 5 == 0 else 1
                boxes = [base_box(rng, w, h, cells[2 * k + j]) for j in range(lesions)]
                raters = 3 if (i + k) % 3 else 1
                rows += rows_for(image_id, cls, boxes, raters, w, h, split)
                counts[split] += 1
        # one empty image per split
        rows.append([f"vd_{split}_nf", "No finding", "R1", "", "", "", "", 1000, 1000, split])
    return rows, counts


def padchest(rng):
    mapping = json.loads((ASSETS / "class_map_padchest.json").read_text())["entries"]
    known = [c for c, m in mapping.items() if m != "unknown"]
    unknown = [c for c, m in mapping.items() if m == "unknown"]
    rows, counts = [], {"known": 0, "unknown": 0}
    plan = [(c, "known") for c in known for _ in range(2)] + [(c, "unknown") for c in unknown for _ in range(2)]
    for i, (cls, group) in enumerate(plan):
        image_id = f"pc_{i:03d}"
        w, h = SIDES[i % len(SIDES)]
        cells = rng.sample(range(4), 2)
        lesions = 2 if i % 7 == 0 else 1
        boxes = [base_box(rng, w, h, cells[j]) for j in range(lesions)]
        rows += rows_for(image_id, cls, boxes, 1, w, h, "")
        counts[group] += 1
    return rows, counts


def write(path, rows, with_split):
    with path.open("w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        cols = COLUMNS if with_split else COLUMNS[:-1]
        out.writerow(cols)
        for r in rows:
            out.writerow(r if with_split else r[:-1])


def main():
    rng = random.Random(20240611)
    rows, vc = vindr(rng)
    write(HERE / "vindr_fixture.csv", rows, True)
    rows, pc = padchest(rng)
    write(HERE / "padchest_fixture.csv", rows, False)
    print(f"vindr: train={vc['train']} test={vc['test']} total={vc['train'] + vc['test']}")
    print(f"padchest: known={pc['known']} unknown={pc['unknown']}")


if __name__ == "__main__":
    main()
