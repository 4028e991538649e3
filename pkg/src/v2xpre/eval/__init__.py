"""Finetuning, detection metrics and the experiment harnesses."""
from v2xpre.boxes import Box3D, Detection, nms, rotated_iou
from v2xpre.eval.detector import (AttentionFuse, DetHead, Detector, attention_fuse,
                                  decode_detections, det_head)
from v2xpre.eval.finetune import FinetuneConfig, FinetuneResult, evaluate, finetune
from v2xpre.eval.metrics import compute_ap, range_bucketed_ap
