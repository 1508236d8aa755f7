#!/usr/bin/env python3
"""Smoke test for the atxf_native extension module.

Build the extension and copy it next to this script first:

    cargo build -p atxf-py
    cp target/debug/libatxf_native.so python/atxf_native.so

then run `python3 python/smoke_test.py`.
"""

import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import atxf_native as ax


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print(f"ok: {msg}")


def main():
    # tensors and autodiff
    a = ax.Tensor([2, 2], [1.0, 2.0, 3.0, 4.0], requires_grad=True)
    b = ax.Tensor([2, 2], [1.0, 0.0, 0.0, 1.0])
    c = a.matmul(b)
    check(c.data == [1.0, 2.0, 3.0, 4.0], "matmul by identity is identity")

    loss = a.matmul(a).mean()
    loss.backward()
    check(a.grad is not None and len(a.grad) == 4, "backward fills gradients")
    # d/dA mean(A @ A) has a closed form; spot-check one entry:
    # d/da00 of (a00^2 + a01*a10 + ...) / 4 = (2*a00 + a01 + a10) / 4
    expect = (2 * 1.0 + 2.0 + 3.0) / 4.0
    check(abs(a.grad[0] - expect) < 1e-12, "gradient matches hand derivative")

    s = ax.Tensor([1, 3], [1.0, 2.0, 3.0]).softmax(1)
    check(abs(sum(s.data) - 1.0) < 1e-12, "softmax row sums to 1")

    # model forward + attention maps
    cfg = ax.ViTConfig(image_size=8, patch_size=4, depth=2, heads=2, dim=8,
                       mlp_ratio=1.0, num_classes=3)
    check(cfg.num_tokens == 5, "8x8/patch4 + CLS = 5 tokens")
    model = ax.Model(cfg, seed=7)
    check(model.num_parameters > 0, "model has parameters")

    rng = random.Random(0)
    images = [rng.random() for _ in range(2 * 3 * 8 * 8)]
    logits = model.forward(images, 2)
    check(len(logits) == 6, "logits are [batch x classes]")

    maps = model.attention_maps(images, 2)
    check(len(maps) == 2, "one attention record per layer")
    n = cfg.num_tokens
    row = maps[0][:n]
    check(abs(sum(row) - 1.0) < 1e-9, "attention rows are distributions")

    # attention copy: student features, teacher maps
    teacher = ax.Model(cfg, seed=8)
    copied = model.forward_with_teacher_maps(teacher, images, 2)
    check(len(copied) == 6, "copy forward produces logits")
    self_copied = model.forward_with_teacher_maps(model, images, 2)
    check(max(abs(x - y) for x, y in zip(self_copied, logits)) < 1e-12,
          "copying a model's own maps changes nothing")

    # checkpoint round trip
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.atxf")
        model.save(path, regime="scratch", epoch=1, seed=7)
        back = ax.Model.load(path)
        logits2 = back.forward(images, 2)
        check(logits == logits2, "checkpoint round-trip is exact")

    # analysis helpers
    check(ax.count_activations(24, 16, 197, 64, "qk_sizes") == 9_682_944,
          "q,k accounting")
    check(ax.count_activations(24, 16, 197, 64, "map_size") == 24 * 16 * 197 * 197,
          "map accounting")

    check(ax.jsd([0.5, 0.5], [0.5, 0.5]) == 0.0, "jsd of identical is 0")
    check(abs(ax.jsd([1.0, 0.0], [0.0, 1.0]) - math.log(2)) < 1e-12,
          "jsd of disjoint is ln 2")

    x = [rng.gauss(0, 1) for _ in range(32 * 4)]
    check(abs(ax.linear_cka(x, x, 32, 4, 4) - 1.0) < 1e-9, "self CKA is 1")

    acc = ax.ensemble_eval([0.9, 0.1, 0.2, 0.8], [0.9, 0.1, 0.2, 0.8], 2, [0, 1])
    check(acc == 1.0, "ensemble accuracy")

    t = ax.Tensor([1, 2], [0.0, 0.0], requires_grad=True)
    tgt = ax.Tensor([1, 2], [0.5, 0.5])
    ce = ax.cross_entropy(t, tgt)
    check(abs(ce.data[0] - math.log(2)) < 1e-12, "uniform CE is ln 2")

    print("\nall smoke tests passed")


if __name__ == "__main__":
    main()
