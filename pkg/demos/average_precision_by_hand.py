"""
Average precision on a toy ranking
==================================

One ground-truth box, two detections. Ranking the hit first gives AP 1;
ranking the miss first halves precision at full recall.
"""

from leapd.detector import Detection
from leapd.evaluation import average_precision, iou, map_metrics

gt = {"img": [(0, 0, 10, 10)]}
hit, miss = (0, 0, 10, 10), (40, 40, 8, 8)
print("hit first :", average_precision([("img", hit, 0.9), ("img", miss, 0.8)], gt, 0.5))
print("miss first:", average_precision([("img", miss, 0.9), ("img", hit, 0.8)], gt, 0.5))

# a detection at IoU 0.6 counts at the 0.5 threshold but not at 0.75
shifted = (0.0, 2.5, 10.0, 10.0)
print("IoU", iou(hit, shifted))
report = map_metrics({"img": [Detection(shifted, 0, 0.9)]}, {"img": [(0, 0, 10, 10, 0)]}, ["car"])
print(report.render())
