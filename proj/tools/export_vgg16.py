#!/usr/bin/env python3
"""Export torchvision VGG16 conv weights as a step tensor blob plus registry.

    python3 tools/export_vgg16.py --out weights/            # downloads via torchvision
    python3 tools/export_vgg16.py --out weights/ --state vgg16.pth

Then set features.weights_registry to weights/registry.json and
features.backbone_id to "vgg16" in the run config.
"""

import argparse
import hashlib
import json
import pathlib
import struct

import torch

MAGIC = b"STEPBLOB"
VERSION = 1
FLOAT32 = 6  # c10::ScalarType::Float
CONVS_PER_BLOCK = [2, 2, 3, 3, 3]


def load_state(path):
    if path:
        return torch.load(path, map_location="cpu")
    import torchvision

    return torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1).state_dict()


def rename(state):
    """features.<i>.{weight,bias} -> conv<b>_<c>.{weight,bias}"""
    conv_indices = sorted({int(k.split(".")[1]) for k in state if k.startswith("features.")})
    names = [f"conv{b + 1}_{c + 1}" for b, n in enumerate(CONVS_PER_BLOCK) for c in range(n)]
    if len(conv_indices) != len(names):
        raise SystemExit(f"expected {len(names)} conv layers, found {len(conv_indices)}")
    out = {}
    for idx, name in zip(conv_indices, names):
        for kind in ("weight", "bias"):
            out[f"{name}.{kind}"] = state[f"features.{idx}.{kind}"].float().contiguous()
    return out


def write_blob(path, tensors):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            t = tensors[name]
            raw = t.numpy().tobytes()
            f.write(struct.pack("<I", len(name)))
            f.write(name.encode())
            f.write(struct.pack("<b", FLOAT32))
            f.write(struct.pack("<I", t.dim()))
            for d in t.shape:
                f.write(struct.pack("<q", d))
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=pathlib.Path)
    ap.add_argument("--state", help="local torchvision vgg16 state_dict (.pth); downloads when omitted")
    ap.add_argument("--id", default="vgg16", help="backbone id written to the registry")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    blob = args.out / f"{args.id}.bin"
    write_blob(blob, rename(load_state(args.state)))
    digest = hashlib.sha256(blob.read_bytes()).hexdigest()
    registry = {"backbones": {args.id: {"path": blob.name, "sha256": digest, "arch": "vgg16"}}}
    (args.out / "registry.json").write_text(json.dumps(registry, indent=2) + "\n")
    print(f"wrote {blob} ({digest})")


if __name__ == "__main__":
    main()
