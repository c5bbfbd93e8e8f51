"""Posterior draws container and the ``draws.bin`` binary frame.

Layout (all little-endian)::

    magic  b"FADRAWS\\0"         8 bytes
    version                     u32 (= 1)
    D, T                        u32, u32
    years                       T x i32
    n_fields, names             u32, then per name: u16 length + UTF-8 bytes
    n_scalars, names            same encoding
    n_hyper, names              same encoding (each contributes sd, range)
    n_draws                     u32
    payload                     n_draws rows of f64: fields (in header order,
                                length D or T), scalars, then (sd, range) per hyper
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import LatentState
from .vecchia import GpHyper

MAGIC = b"FADRAWS\0"
VERSION = 1


@dataclass
class PosteriorDraws:
    fields: dict[str, np.ndarray]
    scalars: dict[str, np.ndarray]
    hyper: dict[str, np.ndarray]
    years: np.ndarray

    def __post_init__(self):
        if len(self) == 0:
            raise ValueError("posterior draws are empty")

    def __len__(self) -> int:
        return len(next(iter(self.scalars.values()))) if self.scalars else 0

    @property
    def n_pixels(self) -> int:
        return self.fields["x_pref"].shape[1]

    def state(self, i: int) -> LatentState:
        return LatentState({k: v[i].copy() for k, v in self.fields.items()},
                           {k: float(v[i]) for k, v in self.scalars.items()},
                           {k: GpHyper(float(v[i, 0]), float(v[i, 1])) for k, v in self.hyper.items()})

    def states(self):
        return (self.state(i) for i in range(len(self)))

    def subset(self, idx) -> PosteriorDraws:
        idx = np.asarray(idx)
        return PosteriorDraws({k: v[idx] for k, v in self.fields.items()},
                              {k: v[idx] for k, v in self.scalars.items()},
                              {k: v[idx] for k, v in self.hyper.items()}, self.years)

    @classmethod
    def from_states(cls, states, years) -> PosteriorDraws:
        states = list(states)
        first = states[0]
        return cls({k: np.array([s.fields[k] for s in states]) for k in first.fields},
                   {k: np.array([s.scalars[k] for s in states]) for k in first.scalars},
                   {k: np.array([[s.hyper[k].sd, s.hyper[k].range] for s in states]) for k in first.hyper},
                   np.asarray(years))

    def matrix(self) -> np.ndarray:
        cols = [v for v in self.fields.values()]
        cols += [v[:, None] for v in self.scalars.values()]
        cols += [v for v in self.hyper.values()]
        return np.hstack(cols)

    def write(self, path):
        D = self.n_pixels
        T = len(self.years)
        out = bytearray(MAGIC)
        out += struct.pack("<III", VERSION, D, T)
        out += np.asarray(self.years, dtype="<i4").tobytes()
        for names in (self.fields, self.scalars, self.hyper):
            out += struct.pack("<I", len(names))
            for name in names:
                b = name.encode("utf-8")
                out += struct.pack("<H", len(b)) + b
        out += struct.pack("<I", len(self))
        out += np.ascontiguousarray(self.matrix(), dtype="<f8").tobytes()
        Path(path).write_bytes(bytes(out))

    @classmethod
    def read(cls, path) -> PosteriorDraws:
        buf = Path(path).read_bytes()
        if buf[:8] != MAGIC:
            raise ValueError(f"{path}: not a draws file")
        version, D, T = struct.unpack_from("<III", buf, 8)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported draws version {version}")
        pos = 20
        years = np.frombuffer(buf, dtype="<i4", count=T, offset=pos).astype(np.int64)
        pos += 4 * T
        groups = []
        for _ in range(3):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            names = []
            for _ in range(n):
                (ln,) = struct.unpack_from("<H", buf, pos)
                pos += 2
                names.append(buf[pos : pos + ln].decode("utf-8"))
                pos += ln
            groups.append(names)
        (n_draws,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        fnames, snames, hnames = groups
        widths = [T if f == "x_year" else D for f in fnames]
        width = sum(widths) + len(snames) + 2 * len(hnames)
        mat = np.frombuffer(buf, dtype="<f8", count=n_draws * width, offset=pos).reshape(n_draws, width)
        mat = mat.astype(float)
        fields, c = {}, 0
        for name, w in zip(fnames, widths):
            fields[name] = mat[:, c : c + w].copy()
            c += w
        scalars = {}
        for name in snames:
            scalars[name] = mat[:, c].copy()
            c += 1
        hyper = {}
        for name in hnames:
            hyper[name] = mat[:, c : c + 2].copy()
            c += 2
        return cls(fields, scalars, hyper, years)
