"""Regenerate frozen reference values with torch as an independent second route.

Run from the repository root (needs torch; the test suite itself does not):

    python tests/oracles/generate_oracles.py

Each fixture stores its own parameter vector, inputs and labels, so the frozen
values do not depend on this package's initializer or data generator. Only
the flat parameter layout is shared: dense weights are (n_in, n_out) row-major
followed by the bias; conv weights are (out_ch, in_ch, k, k) followed by the
bias; layers in order.
"""

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

torch.set_default_dtype(torch.float64)
OUT = Path(__file__).with_name("reference.json")


def n_params(layers, input_shape):
    shape, total = tuple(input_shape), 0
    for layer in layers:
        kind = layer["kind"]
        if kind == "dense":
            total += layer["n_in"] * layer["n_out"] + layer["n_out"]
            shape = (layer["n_out"],)
        elif kind == "conv":
            k, s = layer["kernel"], layer["stride"]
            total += layer["out_ch"] * layer["in_ch"] * k * k + layer["out_ch"]
            shape = (layer["out_ch"], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
        elif kind == "maxpool":
            shape = (shape[0], shape[1] // layer["k"], shape[2] // layer["k"])
        else:
            shape = (int(np.prod(shape)),)
    return total


def torch_logits(fx, theta, x):
    act = torch.tanh if fx["activation"] == "tanh" else torch.relu
    h = x.reshape(x.shape[0], *fx["input_shape"])
    pos = 0
    param_layers = [i for i, l in enumerate(fx["layers"]) if l["kind"] in ("dense", "conv")]
    for i, layer in enumerate(fx["layers"]):
        kind = layer["kind"]
        if kind == "dense":
            W = theta[pos:pos + layer["n_in"] * layer["n_out"]].reshape(layer["n_in"], layer["n_out"])
            pos += W.numel()
            b = theta[pos:pos + layer["n_out"]]
            pos += b.numel()
            h = h @ W + b
        elif kind == "conv":
            k = layer["kernel"]
            W = theta[pos:pos + layer["out_ch"] * layer["in_ch"] * k * k]
            W = W.reshape(layer["out_ch"], layer["in_ch"], k, k)
            pos += W.numel()
            b = theta[pos:pos + layer["out_ch"]]
            pos += b.numel()
            h = F.conv2d(h, W, b, stride=layer["stride"])
        elif kind == "maxpool":
            h = F.max_pool2d(h, layer["k"])
        else:
            h = h.reshape(h.shape[0], -1)
        if kind in ("dense", "conv") and i != param_layers[-1]:
            h = act(h)
    return h


def build(name, input_shape, layers, activation, n_c, n_D, seed, dense_hessian):
    rng = np.random.default_rng(seed)
    p = n_params(layers, input_shape)
    theta = rng.standard_normal(p) * 0.5
    x = rng.standard_normal((n_D, int(np.prod(input_shape))))
    labels = np.arange(n_D) % n_c
    v = rng.standard_normal(p)
    fx = {"name": name, "input_shape": list(input_shape), "layers": layers,
          "activation": activation, "n_c": n_c}

    th = torch.tensor(theta, requires_grad=True)
    xt, yt = torch.tensor(x), torch.tensor(labels)

    def loss_fn(t):
        return F.cross_entropy(torch_logits(fx, t, xt), yt, reduction="mean")

    z = torch_logits(fx, th, xt)
    loss = loss_fn(th)
    (g,) = torch.autograd.grad(loss, th, create_graph=True)
    (hv,) = torch.autograd.grad(g @ torch.tensor(v), th)
    fx.update(theta=theta.tolist(), inputs=x.tolist(), labels=labels.tolist(), v=v.tolist(),
              logits=z.detach().numpy().tolist(), loss=float(loss.detach()), gradient=g.detach().numpy().tolist(),
              hvp=hv.numpy().tolist())
    if dense_hessian:
        H = torch.autograd.functional.hessian(loss_fn, torch.tensor(theta)).numpy()
        w = np.linalg.eigvalsh(0.5 * (H + H.T))
        top = w[np.argsort(-np.abs(w), kind="stable")[:5]]
        fx["top5_by_abs"] = top.tolist()
    return fx


def main():
    mlp = [{"kind": "dense", "n_in": 4, "n_out": 8}, {"kind": "dense", "n_in": 8, "n_out": 8},
           {"kind": "dense", "n_in": 8, "n_out": 3}]
    relu = [{"kind": "dense", "n_in": 5, "n_out": 7}, {"kind": "dense", "n_in": 7, "n_out": 2}]
    conv = [{"kind": "conv", "in_ch": 2, "out_ch": 3, "kernel": 3, "stride": 1},
            {"kind": "maxpool", "k": 2},
            {"kind": "conv", "in_ch": 3, "out_ch": 4, "kernel": 2, "stride": 1},
            {"kind": "flatten"},
            {"kind": "dense", "n_in": 16, "n_out": 5}, {"kind": "dense", "n_in": 5, "n_out": 3}]
    strided = [{"kind": "conv", "in_ch": 1, "out_ch": 2, "kernel": 3, "stride": 2},
               {"kind": "flatten"}, {"kind": "dense", "n_in": 18, "n_out": 2}]
    fixtures = [
        build("mlp_tanh", (4,), mlp, "tanh", 3, 12, 11, True),
        build("mlp_relu", (5,), relu, "relu", 2, 10, 12, False),
        build("conv_tanh", (2, 8, 8), conv, "tanh", 3, 6, 13, True),
        build("conv_relu_stride2", (1, 7, 7), strided, "relu", 2, 5, 14, False),
    ]
    meta = {"generator": "torch " + torch.__version__, "dtype": "float64"}
    OUT.write_text(json.dumps({"meta": meta, "fixtures": fixtures}) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
