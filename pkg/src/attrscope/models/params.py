"""Model parameters, content hashing, and the binary persistence format."""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np

from .vocab import Vocab

MAGIC = b"ATSCOPE1"

AR = "autoregressive"
DIFFUSION = "masked_diffusion"
CLASSIFIER = "classifier"
KINDS = (AR, DIFFUSION, CLASSIFIER)


class ModelIOError(Exception):
    """Corrupt or mismatched model file."""


@dataclass(frozen=True)
class Hyperparams:
    kind: str
    vocab_size: int
    layers: int = 2
    heads: int = 2
    width: int = 64
    mlp_hidden: int = 128
    context_len: int = 64
    n_classes: int = 0  # classifier only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.width % self.heads != 0:
            raise ValueError("width must divide evenly across heads")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


def weight_shapes(hp: Hyperparams) -> dict[str, tuple[int, ...]]:
    d, m = hp.width, hp.mlp_hidden
    dh = hp.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "emb": (hp.vocab_size, d),
        "pos": (hp.context_len, d),
    }
    for i in range(hp.layers):
        p = f"blk{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for h in range(hp.heads):
            shapes[p + f"wq{h}"] = (d, dh)
            shapes[p + f"wk{h}"] = (d, dh)
            shapes[p + f"wv{h}"] = (d, dh)
            shapes[p + f"wo{h}"] = (dh, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w1"] = (d, m)
        shapes[p + "mlp.b1"] = (m,)
        shapes[p + "mlp.w2"] = (m, d)
        shapes[p + "mlp.b2"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    if hp.kind == CLASSIFIER:
        shapes["head.w"] = (d, hp.n_classes)
        shapes["head.b"] = (hp.n_classes,)
    else:
        shapes["out.w"] = (d, hp.vocab_size)
        shapes["out.b"] = (hp.vocab_size,)
    return shapes


@dataclass(frozen=True)
class ModelParams:
    hyper: Hyperparams
    vocab: Vocab
    weights: dict[str, np.ndarray]

    def __post_init__(self):
        expected = weight_shapes(self.hyper)
        if set(expected) != set(self.weights):
            missing = set(expected) ^ set(self.weights)
            raise ValueError(f"weight name mismatch: {sorted(missing)}")
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise ValueError(
                    f"weight {name!r} has shape {self.weights[name].shape}, want {shape}")
        if len(self.vocab) != self.hyper.vocab_size:
            raise ValueError("vocab size disagrees with hyperparams")

    @property
    def kind(self) -> str:
        return self.hyper.kind

    @property
    def model_id(self) -> str:
        header = _header_dict(self)
        digest = hashlib.sha256()
        digest.update(json.dumps(header, sort_keys=True).encode())
        for name in sorted(self.weights):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.weights[name]).astype("<f8").tobytes())
        return digest.hexdigest()


def init_params(hp: Hyperparams, vocab: Vocab, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_shapes(hp).items():
        if name.endswith(".g"):
            weights[name] = np.ones(shape)
        elif name.endswith(".b") or name.endswith((".b1", ".b2")):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.normal(0.0, 0.02, size=shape)
    return ModelParams(hyper=hp, vocab=vocab, weights=weights)


# -- persistence ---------------------------------------------------------


def _header_dict(params: ModelParams) -> dict:
    return {
        "hyper": asdict(params.hyper),
        "vocab": {
            "tokens": list(params.vocab.tokens),
            "pad": params.vocab.pad, "mask": params.vocab.mask,
            "sep": params.vocab.sep, "eos": params.vocab.eos,
        },
        "weight_order": sorted(params.weights),
    }


def save_model(params: ModelParams, path: str) -> None:
    """Single self-describing file: header JSON + little-endian f64 weights."""
    header = _header_dict(params)
    header["model_id"] = params.model_id
    header_bytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(
        np.ascontiguousarray(params.weights[n]).astype("<f8").tobytes()
        for n in sorted(params.weights))
    payload = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + body
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ModelIOError("bad magic; not a model file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelIOError(f"corrupt header: {exc}") from exc
    hp = Hyperparams(**header["hyper"])
    v = header["vocab"]
    vocab = Vocab(tokens=tuple(v["tokens"]), pad=v["pad"], mask=v["mask"],
                  sep=v["sep"], eos=v["eos"])
    shapes = weight_shapes(hp)
    weights = {}
    offset = 12 + hlen
    for name in header["weight_order"]:
        shape = shapes[name]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        weights[name] = arr.reshape(shape).astype(np.float64)
        offset += count * 8
    params = ModelParams(hyper=hp, vocab=vocab, weights=weights)
    if params.model_id != header["model_id"]:
        raise ModelIOError("model_id hash mismatch; file corrupted")
    return params
