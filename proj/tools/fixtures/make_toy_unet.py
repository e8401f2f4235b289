"""Train the desk-scale UNet fixture and export it as manifest + CGW1 blob.

The synthetic task: a bright elliptical "tumor" with an intensity halo inside a
noisy elliptical "brain" on a dark background; the target is the tumor mask.

    python tools/fixtures/make_toy_unet.py --out tests/fixtures/toy_unet --seed 7
"""

import argparse
import hashlib
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

SIZE = 32


def make_sample(rng):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float32)
    cy, cx = SIZE / 2 - 0.5 + rng.normal(0, 0.8, 2)
    ry, rx = 12.5 + rng.normal(0, 0.7), 11.0 + rng.normal(0, 0.7)
    brain = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img = rng.normal(0.05, 0.03, (SIZE, SIZE))
    img[brain] = rng.normal(0.45, 0.06, brain.sum())
    # tumor somewhere inside the brain
    while True:
        ty, tx = rng.uniform(cy - 7, cy + 7), rng.uniform(cx - 6, cx + 6)
        if ((ty - cy) / (ry - 5)) ** 2 + ((tx - cx) / (rx - 5)) ** 2 <= 1.0:
            break
    a, b = rng.uniform(2.5, 4.5), rng.uniform(2.5, 4.5)
    d = ((yy - ty) / a) ** 2 + ((xx - tx) / b) ** 2
    halo = (d > 1.0) & (d <= 2.2)
    tumor = d <= 1.0
    img[halo] += 0.18
    img[tumor] = rng.normal(0.9, 0.05, tumor.sum())
    img = np.clip(img, 0.0, 1.0)
    pixels = np.round(img * 255).astype(np.uint8)
    return pixels, tumor.astype(np.float32)


def make_batch(rng, n):
    xs, ys = zip(*(make_sample(rng) for _ in range(n)))
    x = torch.tensor(np.stack(xs)[:, None].astype(np.float32) / 255.0)
    y = torch.tensor(np.stack(ys)[:, None])
    return x, y


class ToyUNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.enc1 = nn.Conv2d(1, 8, 3, padding=1)
        self.enc2 = nn.Conv2d(8, 8, 3, padding=1)
        self.enc3 = nn.Conv2d(8, 16, 3, padding=1)
        self.enc4 = nn.Conv2d(16, 16, 3, padding=1)
        self.dec1 = nn.Conv2d(24, 8, 3, padding=1)
        self.dec2 = nn.Conv2d(8, 8, 3, padding=1)
        self.head = nn.Conv2d(8, 1, 1)

    def forward(self, x):
        e1 = F.relu(self.enc1(x))
        e2 = F.relu(self.enc2(e1))
        p = F.max_pool2d(e2, 2)
        e3 = F.relu(self.enc3(p))
        e4 = F.relu(self.enc4(e3))
        u = F.interpolate(e4, scale_factor=2, mode="nearest")
        c = torch.cat([e2, u], dim=1)
        d1 = F.relu(self.dec1(c))
        d2 = F.relu(self.dec2(d1))
        return self.head(d2)


def dice(logits, y):
    p = (torch.sigmoid(logits) > 0.5).float()
    return (2 * (p * y).sum() / (p.sum() + y.sum() + 1e-6)).item()


def conv(name, inp, k, pad, act):
    return {"name": name, "kind": "conv2d", "inputs": [inp],
            "params": {"kernel": k, "stride": 1, "padding": pad, "activation": act},
            "weight_ref": name + ".w", "bias_ref": name + ".b"}


def plain(name, kind, inputs, params=None):
    return {"name": name, "kind": kind, "inputs": inputs, "params": params or {},
            "weight_ref": None, "bias_ref": None}


def layer_specs():
    return [
        conv("enc1", "input", 3, 1, "relu"),
        conv("enc2", "enc1", 3, 1, "relu"),
        plain("pool1", "max_pool", ["enc2"], {"size": 2, "stride": 2}),
        conv("enc3", "pool1", 3, 1, "relu"),
        conv("enc4", "enc3", 3, 1, "relu"),
        plain("up1", "upsample_nearest", ["enc4"], {"factor": 2}),
        plain("cat1", "concat", ["enc2", "up1"]),
        conv("dec1", "cat1", 3, 1, "relu"),
        conv("dec2", "dec1", 3, 1, "relu"),
        conv("head", "dec2", 1, 0, "none"),
        plain("prob", "sigmoid", ["head"]),
    ]


def encode_blob(tensors):
    """CGW1 blob: table, 64-byte aligned float32 payload, SHA-256 trailer."""
    names = sorted(tensors)
    table = 8 + sum(2 + len(n.encode()) + 1 + 4 * tensors[n].ndim + 8 for n in names)
    align = lambda v: (v + 63) // 64 * 64
    offset = align(table)
    payload_start = offset
    head = bytearray(b"CGW1" + struct.pack("<I", len(names)))
    for n in names:
        t = tensors[n]
        head += struct.pack("<H", len(n.encode())) + n.encode() + struct.pack("<B", t.ndim)
        head += b"".join(struct.pack("<I", d) for d in t.shape) + struct.pack("<Q", offset)
        offset = align(offset + 4 * t.size)
    out = bytearray(head)
    for n in names:
        out += b"\0" * (align(len(out)) - len(out))
        out += tensors[n].astype("<f4").tobytes()
    if not names:
        out += b"\0" * (payload_start - len(out))
    out += hashlib.sha256(bytes(out[payload_start:])).digest()
    return bytes(out)


def export(model, out_dir):
    tensors = {}
    for name in ["enc1", "enc2", "enc3", "enc4", "dec1", "dec2", "head"]:
        m = getattr(model, name)
        tensors[name + ".w"] = m.weight.detach().numpy().transpose(2, 3, 1, 0).copy()
        tensors[name + ".b"] = m.bias.detach().numpy().copy()
    blob = encode_blob(tensors)
    manifest = {
        "format_version": 1,
        "input_shape": [SIZE, SIZE, 1],
        "task": "segmentation",
        "output_head": "prob",
        "layers": layer_specs(),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(os.path.join(out_dir, "model.json"), "w") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "model.cgw"), "wb") as f:
        f.write(blob)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--probe-count", type=int, default=16)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    rng = np.random.default_rng(args.seed)
    model = ToyUNet()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for step in range(args.steps):
        x, y = make_batch(rng, 16)
        logits = model(x)
        prob = torch.sigmoid(logits)
        soft_dice = 1 - (2 * (prob * y).sum() + 1) / (prob.sum() + y.sum() + 1)
        loss = F.binary_cross_entropy_with_logits(logits, y) + soft_dice
        if not torch.isfinite(loss):
            raise RuntimeError("DivergenceDetected: loss is not finite")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 500 == 0:
            print(f"step {step} loss {loss.item():.4f}")

    val_rng = np.random.default_rng(args.seed + 1000)
    x, y = make_batch(val_rng, 256)
    with torch.no_grad():
        score = dice(model(x), y)
    print(f"validation dice {score:.4f}")

    os.makedirs(os.path.join(args.out, "probe"), exist_ok=True)
    export(model, args.out)
    probe_rng = np.random.default_rng(args.seed + 2000)
    for i in range(args.probe_count):
        pixels, _ = make_sample(probe_rng)
        Image.fromarray(pixels, mode="L").save(os.path.join(args.out, "probe", f"probe_{i:02d}.png"))
    with open(os.path.join(args.out, "train_log.json"), "w") as f:
        json.dump({"seed": args.seed, "steps": args.steps, "validation_dice": round(score, 4)}, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
