#!/usr/bin/env python3
"""Regenerates the test image fixtures and the miniature PyTorch checkpoint.

    python3 scripts/make_fixtures.py crates/core/tests/fixtures
"""

import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from skimage import data


def square(img, size):
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = img[top : top + s, left : left + s]
    return Image.fromarray(crop).resize((size, size), Image.BICUBIC)


def tiny_checkpoint(path):
    """DINO-layout state dict wrapped the way training checkpoints store it."""
    g = torch.Generator().manual_seed(0)
    d, hidden, patch, grid, depth = 64, 128, 4, 2, 2
    sd = {
        "cls_token": torch.randn(1, 1, d, generator=g),
        "pos_embed": torch.randn(1, grid * grid + 1, d, generator=g),
        "patch_embed.proj.weight": torch.randn(d, 3, patch, patch, generator=g) * 0.1,
        "patch_embed.proj.bias": torch.zeros(d),
        "norm.weight": torch.ones(d),
        "norm.bias": torch.zeros(d),
    }
    for i in range(depth):
        p = f"blocks.{i}."
        sd[p + "norm1.weight"] = torch.ones(d)
        sd[p + "norm1.bias"] = torch.zeros(d)
        sd[p + "attn.qkv.weight"] = torch.randn(3 * d, d, generator=g) * 0.1
        sd[p + "attn.qkv.bias"] = torch.zeros(3 * d)
        sd[p + "attn.proj.weight"] = torch.randn(d, d, generator=g) * 0.1
        sd[p + "attn.proj.bias"] = torch.zeros(d)
        sd[p + "norm2.weight"] = torch.ones(d)
        sd[p + "norm2.bias"] = torch.zeros(d)
        sd[p + "mlp.fc1.weight"] = torch.randn(hidden, d, generator=g) * 0.1
        sd[p + "mlp.fc1.bias"] = torch.zeros(hidden)
        sd[p + "mlp.fc2.weight"] = torch.randn(d, hidden, generator=g) * 0.1
        sd[p + "mlp.fc2.bias"] = torch.zeros(d)
    plain = {k: v.contiguous() for k, v in sd.items()}
    torch.save(plain, path / "tiny_vit.pth")
    wrapped = {"module.backbone." + k: v for k, v in plain.items()}
    wrapped["module.head.last_layer.weight"] = torch.zeros(4, d)
    torch.save({"teacher": wrapped, "epoch": 1}, path / "tiny_vit_teacher.pth")
    broken = dict(plain)
    del broken["blocks.1.attn.qkv.bias"]
    broken["blocks.0.attn.rel_pos"] = torch.zeros(3)
    torch.save(broken, path / "tiny_vit_unknown.pth")


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures")
    out.mkdir(parents=True, exist_ok=True)
    square(data.chelsea(), 128).save(out / "structure_128.png")
    square(data.coffee(), 128).save(out / "appearance_128.png")
    square(data.astronaut(), 224).save(out / "source_224.png")
    tiny_checkpoint(out)


if __name__ == "__main__":
    main()
