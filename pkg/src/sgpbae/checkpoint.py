"""Binary checkpoint files.

Layout (all integers and reals little-endian)::

    b"SGPB"                 magic
    u32                     format version (1)
    u32                     number of arrays
    repeated per array:
        u32                 name length in bytes
        bytes               UTF-8 name
        u32                 ndim
        u64 * ndim          dimensions
        f64 * prod(dims)    values in C order
    u32                     config text length in bytes
    bytes                   UTF-8 config echo (key=value lines)

Arrays appear in a fixed order: ``meta.*``, the encoder (``enc.*``), then
each posterior sample ``s<k>.*`` with decoder weights, kernel
hyperparameters, inducing inputs and inducing variables.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autoencoder as ae
from .config import parse_config
from .errors import CheckpointFormatError, MissingCheckpoint

MAGIC = b"SGPB"
VERSION = 1


@dataclass
class Checkpoint:
    arrays: dict
    config_text: str = ""


def _write_array(fh, name, a):
    a = np.asarray(a, dtype="<f8")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes(order="C"))


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(ckpt.arrays)))
        for name, a in ckpt.arrays.items():
            _write_array(fh, name, a)
        text = ckpt.config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise MissingCheckpoint(f"no checkpoint at {path}") from None
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (n,) = r.unpack("<I")
    text = r.take(n).decode("utf-8")
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after config text")
    return Checkpoint(arrays, text)


# ---------------------------------------------------------------------------
# training results <-> checkpoints


def result_to_checkpoint(result, run_config):
    m = result.model
    arrays = {
        "meta.dims": np.array([m.in_dim, m.out_dim, m.aux_dim, m.n_groups], dtype=np.float64),
        "meta.box_lo": m.box[0],
        "meta.box_hi": m.box[1],
        "meta.energies": np.asarray(result.energies, dtype=np.float64),
    }
    for i, a in enumerate(result.encoder.net.arrays()):
        arrays[f"enc.{'Wb'[i % 2]}{i // 2}"] = a
    for k, s in enumerate(result.samples):
        for name in m.layout.names:
            arrays[f"s{k}.{name}"] = s.values[name]
    return Checkpoint(arrays, run_config.to_text())


def checkpoint_to_result(ckpt):
    """Rebuild the model, encoder and posterior samples from a checkpoint."""
    run = parse_config(ckpt.config_text)
    cfg = run.model_config()
    a = ckpt.arrays
    in_dim, out_dim, aux_dim, n_groups = (int(v) for v in a["meta.dims"])
    model = ae.Model(cfg, in_dim, out_dim, aux_dim, n_groups, (a["meta.box_lo"], a["meta.box_hi"]))
    enc_names = sorted((k for k in a if k.startswith("enc.")),
                       key=lambda k: (int(k[5:]), k[4]))
    enc_arrays = [a[k] for k in enc_names]
    net = ae.MLP([(enc_arrays[2 * i], enc_arrays[2 * i + 1]) for i in range(len(enc_arrays) // 2)],
                 cfg.activation)
    encoder = ae.EncoderNet(net, model.seed_dim)
    samples = []
    k = 0
    while f"s{k}.{model.layout.names[0]}" in a:
        samples.append(ae.PosteriorSample({n: a[f"s{k}.{n}"] for n in model.layout.names}, k))
        k += 1
    return ae.TrainResult(model, encoder, samples, list(a["meta.energies"])), run
