#!/usr/bin/env python3
"""Independent reference forward pass for the backbone parity fixture.

Loads a backbone archive (safetensors, DINO/timm tensor names), runs a plain
float64 PyTorch implementation of the pre-norm ViT on a fixed normalized
input and writes the layer-L [CLS] token and keys to a safetensors fixture.

    vitsplice synth-weights --preset vit-b8 --seed 0 --out /tmp/vitb8.safetensors
    python3 scripts/reference_forward.py /tmp/vitb8.safetensors \
        crates/core/tests/fixtures/backbone_parity.safetensors
"""

import argparse
import json
import math

import numpy as np
import torch
from PIL import Image
from safetensors import safe_open
from safetensors.torch import save_file
from skimage import data


def load(path):
    with safe_open(path, framework="pt") as f:
        meta = f.metadata() or {}
        tensors = {k: f.get_tensor(k).to(torch.float64) for k in f.keys()}
    return tensors, meta


def fixed_input(size, mean, std):
    rgb = Image.fromarray(data.astronaut()).resize((size, size), Image.BICUBIC)
    x = torch.from_numpy(np.asarray(rgb, dtype=np.float64) / 255.0).permute(2, 0, 1)
    x = (x - torch.tensor(mean, dtype=torch.float64)[:, None, None]) / torch.tensor(
        std, dtype=torch.float64
    )[:, None, None]
    return x.unsqueeze(0)


def layer_norm(x, w, b, eps):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * w + b


def forward(t, x, depth, heads, patch, eps):
    p = t["patch_embed.proj.weight"]
    tok = torch.nn.functional.conv2d(x, p, t["patch_embed.proj.bias"], stride=patch)
    tok = tok.flatten(2).transpose(1, 2)
    cls = t["cls_token"].expand(x.shape[0], -1, -1)
    z = torch.cat([cls, tok], dim=1) + t["pos_embed"]
    d = z.shape[-1]
    hd = d // heads
    keys = None
    for i in range(depth):
        b = lambda s: t[f"blocks.{i}.{s}"]
        h = layer_norm(z, b("norm1.weight"), b("norm1.bias"), eps)
        qkv = h @ b("attn.qkv.weight").T + b("attn.qkv.bias")
        q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
        keys = k
        n = z.shape[1]
        split = lambda a: a.reshape(1, n, heads, hd).permute(0, 2, 1, 3)
        att = (split(q) @ split(k).transpose(-1, -2)) / math.sqrt(hd)
        att = att.softmax(-1)
        ctx = (att @ split(v)).permute(0, 2, 1, 3).reshape(1, n, d)
        z = z + ctx @ b("attn.proj.weight").T + b("attn.proj.bias")
        h2 = layer_norm(z, b("norm2.weight"), b("norm2.bias"), eps)
        m = torch.nn.functional.gelu(h2 @ b("mlp.fc1.weight").T + b("mlp.fc1.bias"))
        z = z + m @ b("mlp.fc2.weight").T + b("mlp.fc2.bias")
    return z[0, 0], keys[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("archive")
    ap.add_argument("out")
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--checksum", default="", help="archive checksum printed by synth-weights")
    args = ap.parse_args()

    t, meta = load(args.archive)
    depth = int(meta["num_layers"])
    heads = int(meta["num_heads"])
    patch = int(meta["patch_size"])
    eps = float(meta["layer_norm_eps"])
    mean = json.loads(meta["image_mean"]) if meta["image_mean"].startswith("[") else [float(v) for v in meta["image_mean"].split(",")]
    std = json.loads(meta["image_std"]) if meta["image_std"].startswith("[") else [float(v) for v in meta["image_std"].split(",")]

    x = fixed_input(args.size, mean, std)
    with torch.no_grad():
        cls, keys = forward(t, x, depth, heads, patch, eps)
    save_file(
        {
            "input": x.to(torch.float32).contiguous(),
            "cls": cls.to(torch.float32).contiguous(),
            "keys": keys.to(torch.float32).contiguous(),
        },
        args.out,
        metadata={"layer": str(depth), "archive_checksum": args.checksum, "source": meta.get("source", "")},
    )
    print(f"cls norm {cls.norm():.4f}, keys abs max {keys.abs().max():.4f}")


if __name__ == "__main__":
    main()
