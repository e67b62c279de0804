"""Binary frames and the session contract between host and coprocessor.

Frame layout, all multi-byte integers little-endian:

    offset  size  field
    0       2     magic 0x51 0x4C
    2       1     version (1)
    3       1     frame type
    4       8     timestamp, unsigned microseconds
    12      4     payload length
    16      n     payload
    16+n    4     IEEE CRC-32 over bytes [0, 16+n)

Frame types: 0x00 CONFIG, 0x01 POSE_REQ, 0x02 POSE_RESP, 0x03 OBS_GROUPS,
0x04 STATE_UPDATE.

Payloads:

    CONFIG        l_p, l_n, l_z as one byte each, then r_max, r_thr, ds_0,
                  alpha, sigma as f64, then the LiDAR-IMU extrinsic as
                  9 f64 rotation (row-major) + 3 f64 translation.
    POSE_REQ      previous and current scan-end timestamps, u64 microseconds.
    POSE_RESP     scan delta then previous pose, each as a unit quaternion
                  (w, x, y, z) f64 plus a 3 f64 translation.
    OBS_GROUPS    u16 group count, then a continuous MSB-first bitstream:
                  per group the rq key (3*l_n bits) and a 16-bit member
                  count, then per member the z index (l_z bits) and three
                  point indices (l_p bits each). Zero padding to a byte
                  boundary once at payload end.
    STATE_UPDATE  posterior pose, quaternion + translation as above.

The session runs one CONFIG (host to coprocessor) then, per scan, strictly
POSE_REQ -> POSE_RESP -> OBS_GROUPS -> STATE_UPDATE; frames for the next
scan must not precede the STATE_UPDATE of the current one.
"""

from __future__ import annotations

import socket
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .manifold import quat_to_rot, rot_to_quat
from .quantizer import Codebook

MAGIC = b"\x51\x4c"
VERSION = 1
HEADER = struct.Struct("<2sBBQI")
MAX_PAYLOAD = 2 ** 24


class FrameType(IntEnum):
    CONFIG = 0x00
    POSE_REQ = 0x01
    POSE_RESP = 0x02
    OBS_GROUPS = 0x03
    STATE_UPDATE = 0x04


class WireError(Exception):
    """Base for framing and protocol failures."""


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class BadCrc(WireError):
    pass


class TruncatedFrame(WireError):
    """Retriable: more bytes may complete the frame."""


class UnknownFrameType(WireError):
    pass


class ProtocolOrderError(WireError):
    pass


@dataclass
class WireFrame:
    frame_type: int
    timestamp_us: int
    payload: bytes


def encode_frame(frame_type: int, timestamp_us: int, payload: bytes) -> bytes:
    if len(payload) >= MAX_PAYLOAD:
        raise WireError(f"payload of {len(payload)} bytes exceeds the frame limit")
    head = HEADER.pack(MAGIC, VERSION, int(frame_type), int(timestamp_us), len(payload))
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body))


def decode_frame(buf: bytes) -> WireFrame:
    if len(buf) < HEADER.size + 4:
        raise TruncatedFrame("incomplete header")
    magic, version, ftype, timestamp, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"version {version}")
    total = HEADER.size + length + 4
    if len(buf) < total:
        raise TruncatedFrame(f"need {total} bytes, have {len(buf)}")
    (crc,) = struct.unpack_from("<I", buf, HEADER.size + length)
    if crc != zlib.crc32(buf[: HEADER.size + length]):
        raise BadCrc("checksum mismatch")
    if ftype not in FrameType._value2member_map_:
        raise UnknownFrameType(f"frame type 0x{ftype:02x}")
    return WireFrame(FrameType(ftype), timestamp, bytes(buf[HEADER.size: HEADER.size + length]))


class BitWriter:
    """MSB-first bit packer."""

    def __init__(self):
        self._out = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, width: int) -> None:
        if value < 0 or value >> width:
            raise WireError(f"value {value} does not fit in {width} bits")
        self._acc = (self._acc << width) | value
        self._nbits += width
        while self._nbits >= 8:
            self._nbits -= 8
            self._out.append((self._acc >> self._nbits) & 0xFF)
        self._acc &= (1 << self._nbits) - 1

    def getvalue(self) -> bytes:
        out = bytes(self._out)
        if self._nbits:
            out += bytes([(self._acc << (8 - self._nbits)) & 0xFF])
        return out

    @property
    def bit_length(self) -> int:
        return 8 * len(self._out) + self._nbits


class BitReader:
    """MSB-first bit unpacker."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read(self, width: int) -> int:
        end = self._pos + width
        if end > 8 * len(self._data):
            raise TruncatedFrame("bitstream exhausted")
        value = 0
        pos = self._pos
        while width > 0:
            byte = self._data[pos >> 3]
            avail = 8 - (pos & 7)
            take = min(avail, width)
            shift = avail - take
            value = (value << take) | ((byte >> shift) & ((1 << take) - 1))
            pos += take
            width -= take
        self._pos = pos
        return value


def pack_groups(groups, cb: Codebook) -> bytes:
    """Encode an observation group set into the OBS_GROUPS payload."""
    if len(groups) > 0xFFFF:
        raise WireError("too many groups for a 16-bit count")
    writer = BitWriter()
    for group in groups:
        if len(group.members) > 0xFFFF:
            raise WireError("too many members for a 16-bit count")
        writer.write(group.rq_key, 3 * cb.l_n)
        writer.write(len(group.members), 16)
        for z_index, (px, py, pz) in group.members:
            writer.write(z_index, cb.l_z)
            writer.write(px, cb.l_p)
            writer.write(py, cb.l_p)
            writer.write(pz, cb.l_p)
    return struct.pack("<H", len(groups)) + writer.getvalue()


def unpack_groups(payload: bytes, cb: Codebook):
    """Decode an OBS_GROUPS payload back into observation groups."""
    from .coprocessor import ObservationGroup

    if len(payload) < 2:
        raise TruncatedFrame("missing group count")
    (count,) = struct.unpack_from("<H", payload)
    reader = BitReader(payload[2:])
    groups = []
    for _ in range(count):
        key = reader.read(3 * cb.l_n)
        members = []
        for _ in range(reader.read(16)):
            z_index = reader.read(cb.l_z)
            px = reader.read(cb.l_p)
            py = reader.read(cb.l_p)
            pz = reader.read(cb.l_p)
            members.append((z_index, (px, py, pz)))
        groups.append(ObservationGroup(rq_key=key, members=members))
    return groups


def payload_bits(groups, cb: Codebook) -> int:
    """Exact bitstream length before padding (count field excluded)."""
    return sum(3 * cb.l_n + 16 + len(g.members) * (cb.l_z + 3 * cb.l_p) for g in groups)


@dataclass
class SessionConfig:
    """Contents of the CONFIG frame."""

    codebook: Codebook
    ds_0: float
    alpha: float
    sigma: float
    extrinsic_rotation: np.ndarray
    extrinsic_translation: np.ndarray


_CONFIG = struct.Struct("<3B17d")
_POSE_REQ = struct.Struct("<QQ")
_POSE = struct.Struct("<7d")


def encode_config(cfg: SessionConfig) -> bytes:
    cb = cfg.codebook
    return _CONFIG.pack(cb.l_p, cb.l_n, cb.l_z, cb.r_max, cb.r_thr,
                        cfg.ds_0, cfg.alpha, cfg.sigma,
                        *np.asarray(cfg.extrinsic_rotation, dtype=float).reshape(9),
                        *np.asarray(cfg.extrinsic_translation, dtype=float))


def decode_config(payload: bytes) -> SessionConfig:
    if len(payload) != _CONFIG.size:
        raise WireError(f"CONFIG payload must be {_CONFIG.size} bytes")
    vals = _CONFIG.unpack(payload)
    cb = Codebook(l_p=vals[0], l_n=vals[1], l_z=vals[2], r_max=vals[3], r_thr=vals[4])
    return SessionConfig(codebook=cb, ds_0=vals[5], alpha=vals[6], sigma=vals[7],
                         extrinsic_rotation=np.array(vals[8:17]).reshape(3, 3),
                         extrinsic_translation=np.array(vals[17:20]))


def encode_pose_req(t_prev_us: int, t_k_us: int) -> bytes:
    return _POSE_REQ.pack(t_prev_us, t_k_us)


def decode_pose_req(payload: bytes):
    if len(payload) != _POSE_REQ.size:
        raise WireError("POSE_REQ payload must be 16 bytes")
    return _POSE_REQ.unpack(payload)


def _pack_pose(pose) -> bytes:
    rot, trans = pose
    return _POSE.pack(*rot_to_quat(rot), *np.asarray(trans, dtype=float))


def _unpack_pose(payload: bytes, offset: int = 0):
    vals = _POSE.unpack_from(payload, offset)
    return quat_to_rot(vals[:4]), np.array(vals[4:])


def encode_pose_resp(scan_delta, pose_prev) -> bytes:
    return _pack_pose(scan_delta) + _pack_pose(pose_prev)


def decode_pose_resp(payload: bytes):
    if len(payload) != 2 * _POSE.size:
        raise WireError("POSE_RESP payload must be 112 bytes")
    return _unpack_pose(payload, 0), _unpack_pose(payload, _POSE.size)


def encode_state_update(pose) -> bytes:
    return _pack_pose(pose)


def decode_state_update(payload: bytes):
    if len(payload) != _POSE.size:
        raise WireError("STATE_UPDATE payload must be 56 bytes")
    return _unpack_pose(payload)


class SessionTracker:
    """Enforces the per-scan frame ordering for one endpoint."""

    _EXPECT = {
        None: (FrameType.CONFIG,),
        FrameType.CONFIG: (FrameType.POSE_REQ,),
        FrameType.POSE_REQ: (FrameType.POSE_RESP,),
        FrameType.POSE_RESP: (FrameType.OBS_GROUPS,),
        FrameType.OBS_GROUPS: (FrameType.STATE_UPDATE,),
        FrameType.STATE_UPDATE: (FrameType.POSE_REQ,),
    }

    def __init__(self):
        self._last = None

    def observe(self, frame_type: FrameType) -> None:
        allowed = self._EXPECT[self._last]
        if frame_type not in allowed:
            raise ProtocolOrderError(
                f"{frame_type.name} after "
                f"{'session start' if self._last is None else self._last.name}")
        self._last = frame_type


class StreamTransport:
    """Reliable ordered byte link carrying whole frames over a socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.capture_tx: list[bytes] | None = None
        self.capture_rx: list[bytes] | None = None

    def send_frame(self, data: bytes) -> None:
        if self.capture_tx is not None:
            self.capture_tx.append(data)
        self._sock.sendall(data)

    def _recv_exact(self, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            got = self._sock.recv(n - len(chunks))
            if not got:
                raise TruncatedFrame("connection closed mid-frame")
            chunks.extend(got)
        return bytes(chunks)

    def recv_frame(self) -> WireFrame:
        head = self._recv_exact(HEADER.size)
        _, _, _, _, length = HEADER.unpack(head)
        rest = self._recv_exact(length + 4)
        raw = head + rest
        if self.capture_rx is not None:
            self.capture_rx.append(raw)
        return decode_frame(raw)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def inproc_pair() -> tuple[StreamTransport, StreamTransport]:
    """Duplex in-process transport pair backed by a socketpair."""
    a, b = socket.socketpair()
    return StreamTransport(a), StreamTransport(b)


def tcp_listen(port: int) -> socket.socket:
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind(("127.0.0.1", port))
    server.listen(1)
    return server


def tcp_connect(port: int) -> StreamTransport:
    sock = socket.create_connection(("127.0.0.1", port), timeout=10.0)
    return StreamTransport(sock)
