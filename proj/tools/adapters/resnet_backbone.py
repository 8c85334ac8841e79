#!/usr/bin/env python3
"""Frozen ResNet-50 penultimate-layer backbone speaking the spurank line-JSON protocol."""
import json
import sys

import numpy as np
import torch
import torchvision
from PIL import Image

weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V2
model = torchvision.models.resnet50(weights=weights).eval()
model.fc = torch.nn.Identity()
MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)
backbone_id = "torchvision-resnet50-imagenet1k-v2-penultimate"


def embed(hwc):
    # hwc: float32 H x W x 3 in [0,1]; noise may push values outside, which is kept
    x = torch.from_numpy(np.ascontiguousarray(hwc)).permute(2, 0, 1)
    x = torch.nn.functional.interpolate(x[None], size=(224, 224), mode="bilinear", align_corners=False)[0]
    x = (x - MEAN) / STD
    with torch.no_grad():
        return model(x[None])[0].tolist()


for line in sys.stdin:
    if not line.strip():
        continue
    reply = {}
    try:
        req = json.loads(line)
        reply["request_id"] = req["request_id"]
        if req.get("info"):
            reply["backbone_id"] = backbone_id
            reply["d"] = 2048
        elif "image_path" in req:
            img = np.asarray(Image.open(req["image_path"]).convert("RGB"), dtype=np.float32) / 255.0
            reply["embedding"] = embed(img)
        else:
            raw = np.fromfile(req["tensor_path"], dtype="<f4")
            reply["embedding"] = embed(raw.reshape(req["height"], req["width"], 3))
    except Exception as e:
        reply["error"] = str(e)
    sys.stdout.write(json.dumps(reply) + "\n")
    sys.stdout.flush()
