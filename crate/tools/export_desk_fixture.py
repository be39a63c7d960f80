#!/usr/bin/env python3
"""Train the desk-scale ConvNet and export the fixture bundle.

Reads the 5000-sample MNIST subset that ships with mlxtend
(``mlxtend/data/data/mnist_5k.csv.gz``), trains a 6-conv BatchNorm network,
folds BatchNorm into the conv weights and writes:

    float.cora-model        folded float model
    calibration.cora-data   1600 calibration images (subset of the training split)
    validation.cora-data    held-out validation images
    probe.json              one probe input and the float32 logits recorded for it
    export.json             training metadata

Usage: python3 tools/export_desk_fixture.py --csv mnist_5k.csv.gz --out DIR
"""

import argparse
import gzip
import hashlib
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FORMAT_VERSION = 1
WIDTHS = [8, 8, 16, 16, 32, 128]
POOL_AFTER = {1, 3}
VALIDATION = 1400
CALIBRATION = 1600


def write_container(path, manifest, blob):
    manifest = dict(manifest, format_version=FORMAT_VERSION, blob_len=len(blob))
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = b"CORA" + struct.pack("<IQ", FORMAT_VERSION, len(text)) + text + blob
    with open(path, "wb") as f:
        f.write(body + hashlib.sha256(body).digest())


class Blob:
    def __init__(self):
        self.parts, self.size = [], 0

    def push(self, array, dtype):
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        ref = {"offset": self.size, "len": len(raw)}
        self.parts.append(raw)
        self.size += len(raw)
        return ref

    def bytes(self):
        return b"".join(self.parts)


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.convs, self.bns, c = nn.ModuleList(), nn.ModuleList(), 1
        for w in WIDTHS:
            self.convs.append(nn.Conv2d(c, w, 3, padding=1, bias=False))
            self.bns.append(nn.BatchNorm2d(w))
            c = w
        self.fc = nn.Linear(c, 10)

    def forward(self, x):
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            x = F.relu(bn(conv(x)))
            if i in POOL_AFTER:
                x = F.max_pool2d(x, 2)
        return self.fc(F.avg_pool2d(x, x.shape[-1]).flatten(1))


def folded_forward(weights, biases, fc_w, fc_b, x):
    for i, (w, b) in enumerate(zip(weights, biases)):
        x = F.relu(F.conv2d(x, w, b, padding=1))
        if i in POOL_AFTER:
            x = F.max_pool2d(x, 2)
    return F.linear(F.avg_pool2d(x, x.shape[-1]).flatten(1), fc_w, fc_b)


def export_dataset(path, split, images, labels):
    blob = Blob()
    manifest = {
        "kind": "dataset",
        "split": split,
        "count": int(len(labels)),
        "image_shape": list(images.shape[1:]),
        "num_classes": 10,
        "images": blob.push(images, "<f4"),
        "labels": blob.push(labels, "<u4"),
    }
    write_container(path, manifest, blob.bytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--csv", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    rng = np.random.RandomState(args.seed)

    raw = np.loadtxt(gzip.open(args.csv), delimiter=",")
    images = (raw[:, :-1] / 255.0).astype(np.float32).reshape(-1, 1, 28, 28)
    labels = raw[:, -1].astype(np.int64)
    perm = rng.permutation(len(labels))
    val_idx, train_idx = perm[:VALIDATION], perm[VALIDATION:]
    calib_idx = train_idx[:CALIBRATION]

    xtr, ytr = torch.tensor(images[train_idx]), torch.tensor(labels[train_idx])
    xva, yva = torch.tensor(images[val_idx]), torch.tensor(labels[val_idx])

    net = Net()
    opt = torch.optim.Adam(net.parameters(), 2e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.epochs)
    for _ in range(args.epochs):
        net.train()
        order = torch.randperm(len(ytr))
        for i in range(0, len(order), 64):
            idx = order[i:i + 64]
            dy, dx = rng.randint(-2, 3, 2)
            xb = torch.roll(xtr[idx], shifts=(int(dy), int(dx)), dims=(2, 3))
            loss = F.cross_entropy(net(xb), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    net.eval()

    weights, biases = [], []
    with torch.no_grad():
        for conv, bn in zip(net.convs, net.bns):
            gain = bn.weight / torch.sqrt(bn.running_var + bn.eps)
            weights.append((conv.weight * gain[:, None, None, None]).float().contiguous())
            biases.append((bn.bias - bn.running_mean * gain).float().contiguous())
        fc_w, fc_b = net.fc.weight.detach().float(), net.fc.bias.detach().float()
        ref = net(xva)
        folded = folded_forward(weights, biases, fc_w, fc_b, xva)
        fold_err = (ref - folded).abs().max().item()
        if fold_err > 1e-4:
            raise SystemExit(f"normalization folding mismatch: {fold_err}")
        accuracy = (folded.argmax(1) == yva).double().mean().item()
        if accuracy < 0.97:
            raise SystemExit(f"validation accuracy {accuracy:.4f} below 0.97")
        probe = xva[:1]
        probe_logits = folded_forward(weights, biases, fc_w, fc_b, probe)[0]

    os.makedirs(args.out, exist_ok=True)
    blob, layers, channels = Blob(), [], 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        layers.append({
            "type": "conv",
            "out_channels": int(w.shape[0]),
            "in_channels": channels,
            "kernel": [3, 3],
            "stride": [1, 1],
            "padding": [1, 1],
            "weight": blob.push(w.numpy(), "<f4"),
            "bias": blob.push(b.numpy(), "<f4"),
        })
        layers.append({"type": "relu"})
        if i in POOL_AFTER:
            layers.append({"type": "max_pool", "kernel": 2, "stride": 2})
        channels = int(w.shape[0])
    layers.append({"type": "avg_pool", "kernel": 7, "stride": 7})
    layers.append({"type": "flatten"})
    layers.append({
        "type": "dense",
        "out_features": 10,
        "in_features": channels,
        "weight": blob.push(fc_w.numpy(), "<f4"),
        "bias": blob.push(fc_b.numpy(), "<f4"),
    })
    manifest = {
        "kind": "model",
        "provenance": f"desk mnist-5k convnet, seed {args.seed}, {args.epochs} epochs, bn folded",
        "input_shape": [1, 28, 28],
        "num_classes": 10,
        "layers": layers,
    }
    write_container(os.path.join(args.out, "float.cora-model"), manifest, blob.bytes())

    export_dataset(os.path.join(args.out, "calibration.cora-data"), "calibration",
                   images[calib_idx], labels[calib_idx].astype(np.uint32))
    export_dataset(os.path.join(args.out, "validation.cora-data"), "validation",
                   images[val_idx], labels[val_idx].astype(np.uint32))

    with open(os.path.join(args.out, "probe.json"), "w") as f:
        json.dump({
            "input_shape": [1, 28, 28],
            "input": [float(v) for v in probe[0].flatten().tolist()],
            "logits": [float(v) for v in probe_logits.tolist()],
        }, f)
    with open(os.path.join(args.out, "export.json"), "w") as f:
        json.dump({
            "seed": args.seed,
            "epochs": args.epochs,
            "train_samples": int(len(train_idx)),
            "calibration_samples": int(len(calib_idx)),
            "validation_samples": int(len(val_idx)),
            "validation_accuracy": accuracy,
            "fold_max_abs_error": fold_err,
        }, f, indent=2, sort_keys=True)
    print(f"validation accuracy {accuracy:.4f}; fold error {fold_err:.2e}")


if __name__ == "__main__":
    main()
