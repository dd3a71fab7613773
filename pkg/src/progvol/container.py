"""Layered, prefix-truncatable bitstream for one Group of Features.

File layout (little-endian), extension `.hpvc`:

  header:
    magic 'HPVC' (4s), version (u16), gof_index (u32), start_frame (u32),
    n_frames (u16), L (u16), stored_max_level (u16), channels (u16),
    bbox min/max (6 f64), per level: dims (3 u16),
    per level: q (f32),
    per stored level (1..stored_max_level): table offset (i16) and 256
      frequencies minus one (u16 each),
    decoder net: hidden (u16), n_freqs (u16), weight count (u32),
      weights (f32 each),
    CRC32 of all previous header bytes (u32).
  body, frame-major:
    for each frame, for each level 1..stored_max_level, one chunk:
      level (u8), q (f32), min_q (i16), payload length (u32), payload bytes.

Chunks within a frame are strictly ascending in level, so decoding a prefix
of levels never needs to entropy-decode the rest: their payloads are skipped
via the length fields.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .entropy import EntropyModel, build_coding_table
from .field import GoF, GridStack, HierarchicalField, LevelGrid, ResidualSet
from .quant import QuantizedLevel, QuantRangeError, dequantize, quantize, round_half_away
from .rangecoder import CodingTable, range_decode, range_encode
from .renderer import DecoderNet

MAGIC = b"HPVC"
VERSION = 1
CHUNK_HEADER_SIZE = 1 + 4 + 2 + 4


class StreamFormatError(ValueError):
    """Corrupt, truncated or unsupported bitstream."""


@dataclass
class Chunk:
    level: int
    q: float
    min_q: int
    payload: bytes

    @property
    def size(self) -> int:
        return CHUNK_HEADER_SIZE + len(self.payload)


@dataclass
class GoFBitstream:
    gof_index: int
    start_frame: int
    n_levels: int
    stored_max_level: int
    channels: int
    bbox: torch.Tensor
    dims: list[tuple[int, int, int]]
    q_per_level: list[float]
    tables: list[CodingTable]          # one per stored level
    decoder_hidden: int
    decoder_n_freqs: int
    decoder_weights: np.ndarray        # flat float32
    frames: list[list[Chunk]]          # per frame, ascending levels

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def chunk_sizes(self) -> list[list[int]]:
        """Per-frame, per-stored-level byte counts (chunk headers included)."""
        return [[c.size for c in frame] for frame in self.frames]

    def header_bytes(self) -> bytes:
        h = bytearray()
        h += MAGIC
        h += struct.pack("<HIIHHHH", VERSION, self.gof_index, self.start_frame,
                         self.n_frames, self.n_levels, self.stored_max_level,
                         self.channels)
        h += struct.pack("<6d", *self.bbox.reshape(-1).tolist())
        for d in self.dims:
            h += struct.pack("<3H", *d)
        h += struct.pack(f"<{self.n_levels}f", *self.q_per_level)
        for t in self.tables:
            h += struct.pack("<h", t.offset)
            h += struct.pack("<256H", *(int(f) - 1 for f in t.freqs))
        w = np.asarray(self.decoder_weights, dtype=np.float32)
        h += struct.pack("<HHI", self.decoder_hidden, self.decoder_n_freqs, w.size)
        h += w.tobytes()
        h += struct.pack("<I", zlib.crc32(bytes(h)))
        return bytes(h)

    def to_bytes(self) -> bytes:
        out = bytearray(self.header_bytes())
        for frame in self.frames:
            for c in frame:
                out += struct.pack("<BfhI", c.level, c.q, c.min_q, len(c.payload))
                out += c.payload
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "GoFBitstream":
        try:
            return cls._parse(data)
        except struct.error as e:
            raise StreamFormatError(f"truncated stream: {e}") from e

    @classmethod
    def _parse(cls, data: bytes) -> "GoFBitstream":
        if data[:4] != MAGIC:
            raise StreamFormatError("bad magic, not an .hpvc stream")
        pos = 4
        version, gof_index, start_frame, n_frames, n_levels, stored, channels = \
            struct.unpack_from("<HIIHHHH", data, pos)
        pos += struct.calcsize("<HIIHHHH")
        if version != VERSION:
            raise StreamFormatError(f"unknown version {version}")
        bbox = torch.tensor(struct.unpack_from("<6d", data, pos),
                            dtype=torch.float64).reshape(2, 3)
        pos += 48
        dims = []
        for _ in range(n_levels):
            dims.append(struct.unpack_from("<3H", data, pos))
            pos += 6
        q_per_level = list(struct.unpack_from(f"<{n_levels}f", data, pos))
        pos += 4 * n_levels
        tables = []
        for _ in range(stored):
            (offset,) = struct.unpack_from("<h", data, pos)
            pos += 2
            freqs = np.array(struct.unpack_from("<256H", data, pos), dtype=np.int64) + 1
            pos += 512
            tables.append(CodingTable(freqs, offset))
        hidden, n_freqs, n_weights = struct.unpack_from("<HHI", data, pos)
        pos += 8
        weights = np.frombuffer(data, dtype="<f4", count=n_weights, offset=pos).copy()
        pos += 4 * n_weights
        (crc,) = struct.unpack_from("<I", data, pos)
        if crc != zlib.crc32(data[:pos]):
            raise StreamFormatError("header checksum mismatch")
        pos += 4
        frames = []
        for fi in range(n_frames):
            chunks = []
            prev_level = 0
            for _ in range(stored):
                level, q, min_q, plen = struct.unpack_from("<BfhI", data, pos)
                pos += CHUNK_HEADER_SIZE
                if level <= prev_level:
                    raise StreamFormatError(f"frame {fi}: chunk levels not ascending")
                prev_level = level
                if pos + plen > len(data):
                    raise StreamFormatError(f"frame {fi} level {level}: truncated chunk")
                chunks.append(Chunk(level, q, min_q, bytes(data[pos:pos + plen])))
                pos += plen
            frames.append(chunks)
        return cls(gof_index, start_frame, n_levels, stored, channels, bbox,
                   dims, q_per_level, tables, hidden, n_freqs, weights, frames)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GoFBitstream":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _flatten_decoder(net: DecoderNet) -> np.ndarray:
    return np.concatenate([p.detach().cpu().numpy().reshape(-1)
                           for _, p in sorted(net.state_dict().items())]).astype(np.float32)


def decoder_from_stream(stream: GoFBitstream) -> DecoderNet:
    net = DecoderNet(stream.channels, stream.decoder_hidden, stream.decoder_n_freqs)
    state = net.state_dict()
    flat = torch.from_numpy(stream.decoder_weights)
    pos = 0
    for name in sorted(state.keys()):
        n = state[name].numel()
        state[name] = flat[pos:pos + n].reshape(state[name].shape)
        pos += n
    if pos != flat.numel():
        raise StreamFormatError(f"decoder weight count mismatch: {flat.numel()} vs {pos}")
    net.load_state_dict(state)
    return net


def _frame_stacks(gof: GoF) -> list[GridStack]:
    return [gof.keyframe, *gof.residuals]


def encode_gof(gof: GoF, net: DecoderNet, models: EntropyModel,
               q_per_level, gof_index: int = 0) -> GoFBitstream:
    """Quantize and range-encode every level of every frame of the GoF.

    The keyframe is coded through the same path as the residuals (it is the
    residual against an implicit all-zero reference). All frames of one level
    share a single coding table and min shift, chosen from the pooled value
    range of the GoF, so the table can live in the header.
    """
    L = gof.keyframe.num_levels
    if np.isscalar(q_per_level):
        q_per_level = [float(q_per_level)] * L
    if len(q_per_level) != L or models.n_levels < L:
        raise ValueError("q_per_level / entropy model do not cover every level")
    stacks = _frame_stacks(gof)
    # Pooled per-level shift so one header table serves the whole GoF.
    offsets, spans = [], []
    for li in range(L):
        q = q_per_level[li]
        los, his = [], []
        for st in stacks:
            v = st.levels[li].values.double()
            los.append(int(round_half_away(q * v.min()).item()))
            his.append(int(round_half_away(q * v.max()).item()))
        offsets.append(min(los))
        spans.append(max(his) - min(los))
        if spans[-1] > 255:
            raise QuantRangeError(
                f"level {li + 1}: pooled quantized span {spans[-1]} > 255 at q={q}; "
                f"reduce q or the residual dynamic range")
    tables = [build_coding_table(models, li + 1, offsets[li]) for li in range(L)]
    frames = []
    for st in stacks:
        chunks = []
        for li in range(L):
            q = q_per_level[li]
            ql = quantize(st.levels[li], q, min_q=offsets[li])
            payload = range_encode(ql.symbols.reshape(-1).numpy(), tables[li])
            chunks.append(Chunk(li + 1, float(q), offsets[li], payload))
        frames.append(chunks)
    return GoFBitstream(
        gof_index=gof_index, start_frame=gof.start_frame, n_levels=L,
        stored_max_level=L, channels=gof.keyframe.channels, bbox=gof.keyframe.bbox,
        dims=gof.keyframe.dims(), q_per_level=[float(q) for q in q_per_level],
        tables=tables, decoder_hidden=net.hidden, decoder_n_freqs=net.n_freqs,
        decoder_weights=_flatten_decoder(net), frames=frames)


def decode_gof(stream: GoFBitstream, max_level: int | None = None,
               dtype=torch.float32) -> list[HierarchicalField]:
    """Decode every frame up to max_level; higher levels come back all-zero.

    Chunks above max_level are skipped without entropy decoding.
    """
    L = stream.n_levels
    if max_level is None:
        max_level = stream.stored_max_level
    if not 1 <= max_level <= L:
        raise ValueError(f"max_level {max_level} outside [1, {L}]")
    if max_level > stream.stored_max_level:
        raise StreamFormatError(
            f"stream stores levels up to {stream.stored_max_level}, asked for {max_level}")
    recon = [torch.zeros(*d, stream.channels, dtype=dtype) for d in stream.dims]
    fields = []
    for fi, chunks in enumerate(stream.frames):
        for c in chunks:
            if c.level > max_level:
                continue
            d = stream.dims[c.level - 1]
            count = int(np.prod(d)) * stream.channels
            symbols = range_decode(c.payload, count, stream.tables[c.level - 1])
            ql = QuantizedLevel(torch.from_numpy(symbols).reshape(*d, stream.channels),
                                c.q, c.min_q, c.level, stream.bbox)
            recon[c.level - 1] = recon[c.level - 1] + dequantize(ql, dtype).values
        levels = [LevelGrid(li + 1, recon[li].clone(), stream.bbox) for li in range(L)]
        fields.append(HierarchicalField(stream.start_frame + fi, levels))
    return fields


def truncate_stream(stream: GoFBitstream, max_level: int) -> GoFBitstream:
    """Drop every chunk (and header table) above max_level."""
    if not 1 <= max_level <= stream.n_levels:
        raise ValueError(f"max_level {max_level} outside [1, {stream.n_levels}]")
    keep = min(max_level, stream.stored_max_level)
    return GoFBitstream(
        gof_index=stream.gof_index, start_frame=stream.start_frame,
        n_levels=stream.n_levels, stored_max_level=keep, channels=stream.channels,
        bbox=stream.bbox, dims=list(stream.dims), q_per_level=list(stream.q_per_level),
        tables=stream.tables[:keep], decoder_hidden=stream.decoder_hidden,
        decoder_n_freqs=stream.decoder_n_freqs, decoder_weights=stream.decoder_weights,
        frames=[[c for c in frame if c.level <= keep] for frame in stream.frames])


def gof_from_fields(fields: list[HierarchicalField], start_frame: int | None = None) -> GoF:
    """Rebuild a GoF from reconstructed frames by differencing consecutive ones."""
    if not fields:
        raise ValueError("no frames")
    if start_frame is None:
        start_frame = fields[0].frame_index
    key = fields[0]
    residuals = []
    for prev, cur in zip(fields, fields[1:]):
        levels = [LevelGrid(a.level, b.values - a.values, a.bbox)
                  for a, b in zip(prev.levels, cur.levels)]
        residuals.append(ResidualSet(cur.frame_index, levels))
    return GoF(start_frame, HierarchicalField(key.frame_index, key.levels), residuals)
