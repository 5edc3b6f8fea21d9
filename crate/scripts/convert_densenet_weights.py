#!/usr/bin/env python3
"""Convert a torchvision DenseNet-121 state dict into an apgan weight manifest.

Only the stem and the first dense block are exported; the discriminator's
extractor uses nothing beyond them.

    python scripts/convert_densenet_weights.py densenet121.pth weights/densenet121_block1.apw
    python scripts/convert_densenet_weights.py --download weights/densenet121_block1.apw
"""

import argparse
import json
import re
import struct
import sys

import numpy as np

MAGIC = b"APGANWM\0"
VERSION = 1
DENSE_LAYERS = 6
BN_FIELDS = ("weight", "bias", "running_mean", "running_var")


def wanted_names():
    names = ["features.conv0.weight"] + [f"features.norm0.{f}" for f in BN_FIELDS]
    for i in range(1, DENSE_LAYERS + 1):
        p = f"features.denseblock1.denselayer{i}"
        for k in (1, 2):
            names += [f"{p}.norm{k}.{f}" for f in BN_FIELDS]
            names.append(f"{p}.conv{k}.weight")
    return names


def unit_names():
    units = []
    for i in range(DENSE_LAYERS, 0, -1):
        units += [f"denseblock1.denselayer{i}.conv2", f"denseblock1.denselayer{i}.conv1"]
    return units + ["conv0"]


# Old checkpoints spell `norm.1` / `conv.2`; torchvision renames them the same way.
LEGACY = re.compile(r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$")


def normalize_keys(state):
    out = {}
    for k, v in state.items():
        m = LEGACY.match(k)
        out[m.group(1) + m.group(2) if m else k] = v
    return out


def write_manifest(path, tensors):
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        data = arr.tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset, "len": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"units": unit_names(), "metadata": {"backbone": "dense", "source": "torchvision densenet121"}, "tensors": entries},
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("state_dict", nargs="?", help="path to a .pth state dict")
    ap.add_argument("output", help="manifest to write")
    ap.add_argument("--download", action="store_true", help="fetch ImageNet weights through torchvision")
    args = ap.parse_args()

    import torch

    if args.download:
        from torchvision.models import DenseNet121_Weights, densenet121

        state = densenet121(weights=DenseNet121_Weights.IMAGENET1K_V1).state_dict()
    elif args.state_dict:
        state = torch.load(args.state_dict, map_location="cpu")
        state = state.get("state_dict", state)
    else:
        ap.error("give a state dict path or --download")
    state = normalize_keys(state)
    missing = [n for n in wanted_names() if n not in state]
    if missing:
        sys.exit(f"state dict lacks {len(missing)} tensors, e.g. {missing[:3]}")
    write_manifest(args.output, {n: state[n].detach().cpu().numpy() for n in wanted_names()})
    print(f"wrote {len(wanted_names())} tensors to {args.output}")


if __name__ == "__main__":
    main()
