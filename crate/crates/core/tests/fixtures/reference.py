"""Independent numpy forward pass for a saved model; writes golden logits.

usage: python3 reference.py <model dir> <out.json>
"""
import json
import sys
from pathlib import Path

import numpy as np

INPUTS = ["good food", "the service was not very good .", "terrible", "i would never eat here again !"]


def load(d):
    man = json.loads((d / "model.json").read_text())
    blob = np.frombuffer((d / "model.bin").read_bytes(), dtype="<f4").astype(np.float64)
    t = {}
    for e in man["tensors"]:
        size = int(np.prod(e["shape"]))
        start = e["offset"] // 4
        t[e["name"]] = blob[start:start + size].reshape(e["shape"])
    vocab = {}
    for line in (d / "vocab.tsv").read_text().splitlines():
        tok, row = line.split("\t")
        vocab[tok] = int(row)
    return man["hyper"], t, vocab


def layer_norm(x, w, b, mode):
    mu = x.mean(axis=-1, keepdims=True)
    c = x - mu
    if mode["mode"] == "none":
        return x
    if mode["mode"] == "standard":
        c = c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + mode["eps"])
    return c * w + b


def logits(hyper, t, ids):
    mode = hyper["layernorm"]
    heads = hyper["heads"]
    d = hyper["d_model"]
    dk = d // heads
    aff = lambda name, x: x @ t[name + ".weight"].T + t[name + ".bias"]
    x = t["embed"][ids] + t["pos_enc"][: len(ids)]
    x = layer_norm(x, t["embed_ln.weight"], t["embed_ln.bias"], mode)
    for i in range(hyper["num_layers"]):
        p = f"layers.{i}."
        q, k, v = aff(p + "query", x), aff(p + "key", x), aff(p + "value", x)
        out = np.zeros_like(x)
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
            s = np.exp(s - s.max(axis=1, keepdims=True))
            out[:, sl] = (s / s.sum(axis=1, keepdims=True)) @ v[:, sl]
        x = layer_norm(x + aff(p + "output", out), t[p + "ln1.weight"], t[p + "ln1.bias"], mode)
        f = aff(p + "ffn_out", np.maximum(aff(p + "ffn_in", x), 0.0))
        x = layer_norm(x + f, t[p + "ln2.weight"], t[p + "ln2.bias"], mode)
    return aff("head", x.mean(axis=0))


def main():
    d = Path(sys.argv[1])
    hyper, t, vocab = load(d)
    cases = []
    for text in INPUTS:
        ids = [vocab.get(w, vocab["<unk>"]) for w in text.lower().split()]
        cases.append({"text": text, "ids": ids, "logits": logits(hyper, t, ids).tolist()})
    Path(sys.argv[2]).write_text(json.dumps(cases, indent=2) + "\n")


if __name__ == "__main__":
    main()
