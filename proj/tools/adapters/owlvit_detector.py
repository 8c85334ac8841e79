#!/usr/bin/env python3
"""OWL-ViT detector adapter speaking the spurank line-JSON protocol on stdin/stdout."""
import json
import sys

import torch
from PIL import Image
from transformers import OwlViTForObjectDetection, OwlViTProcessor

MODEL = sys.argv[1] if len(sys.argv) > 1 else "google/owlvit-base-patch32"
THRESHOLD = float(sys.argv[2]) if len(sys.argv) > 2 else 0.0

processor = OwlViTProcessor.from_pretrained(MODEL)
model = OwlViTForObjectDetection.from_pretrained(MODEL).eval()
backend_id = f"owlvit:{MODEL}:thr={THRESHOLD}"


def detect(path, queries):
    image = Image.open(path).convert("RGB")
    inputs = processor(text=[queries], images=image, return_tensors="pt")
    with torch.no_grad():
        outputs = model(**inputs)
    target = torch.tensor([[image.height, image.width]])
    result = processor.post_process_object_detection(outputs, threshold=THRESHOLD, target_sizes=target)[0]
    boxes = []
    for box, score, label in zip(result["boxes"].tolist(), result["scores"].tolist(), result["labels"].tolist()):
        x0, y0, x1, y1 = box
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(float(image.width), x1), min(float(image.height), y1)
        if x1 <= x0 or y1 <= y0:
            continue
        boxes.append({"x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1,
                      "score": min(max(score, 0.0), 1.0), "query_index": int(label)})
    return boxes


for line in sys.stdin:
    if not line.strip():
        continue
    reply = {}
    try:
        req = json.loads(line)
        reply["request_id"] = req["request_id"]
        if req.get("info"):
            reply["backend_id"] = backend_id
        else:
            reply["boxes"] = detect(req["image_path"], req["queries"])
    except Exception as e:  # reported to spurank, which retries or skips the image
        reply["error"] = str(e)
    sys.stdout.write(json.dumps(reply) + "\n")
    sys.stdout.flush()
