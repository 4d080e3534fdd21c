"""Reference breakdown for hand_fixture.json computed with pycocotools.

Masks are unions of [x, y, w, h] pixel rectangles. Area ranges are COCO's
32^2 / 96^2 limits scaled by (image area / 640^2).
Usage: python3 coco_oracle.py > hand_fixture_expected.json
"""
import contextlib
import io
import json
import pathlib

import numpy as np
from pycocotools import mask as mask_util
from pycocotools.coco import COCO
from pycocotools.cocoeval import COCOeval

here = pathlib.Path(__file__).parent
fixture = json.loads((here / "hand_fixture.json").read_text())
size = fixture["image_size"]
cat = fixture["class_id"]


def bitmap(rects):
    m = np.zeros((size, size), dtype=np.uint8)
    for x, y, w, h in rects:
        m[y:y + h, x:x + w] = 1
    return m


def rle(m):
    r = mask_util.encode(np.asfortranarray(m))
    r["counts"] = r["counts"].decode("ascii")
    return r


def bbox(m):
    ys, xs = np.nonzero(m)
    return [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]


images, anns, dets = [], [], []
for im in fixture["images"]:
    images.append({"id": im["id"], "height": size, "width": size})
    for g in im["gts"]:
        m = bitmap(g["rects"])
        anns.append({"id": len(anns) + 1, "image_id": im["id"], "category_id": cat, "iscrowd": 0,
                     "area": int(m.sum()), "bbox": bbox(m), "segmentation": rle(m)})
    for d in im["dets"]:
        m = bitmap(d["rects"])
        dets.append({"image_id": im["id"], "category_id": cat, "score": d["score"], "segmentation": rle(m)})

scale = size * size / 640.0 ** 2
with contextlib.redirect_stdout(io.StringIO()):
    gt = COCO()
    gt.dataset = {"images": images, "annotations": anns, "categories": [{"id": cat, "name": "c"}]}
    gt.createIndex()
    dt = gt.loadRes(dets)
    ev = COCOeval(gt, dt, "segm")
    ev.params.catIds = [cat]
    ev.params.areaRng = [[0, 1e10], [0, 32 ** 2 * scale], [32 ** 2 * scale, 96 ** 2 * scale], [96 ** 2 * scale, 1e10]]
    ev.params.maxDets = [1, 10, 100]
    ev.evaluate()
    ev.accumulate()
    ev.summarize()

s = ev.stats
print(json.dumps({"ap": s[0], "ap50": s[1], "ap75": s[2], "aps": s[3], "apm": s[4], "apl": s[5]}, indent=2))
