"""Telephony channel: a surrogate lossy codec, packet loss with redundancy, RTP-like UDP transport.

The surrogate codec band-limits to 300-3400 Hz and stores every sample as an
8-bit mu-law code.  Frames are 20 ms by default.  With redundancy on, each
encoded frame also carries the previous frame's payload, so an isolated loss
is repaired exactly from the packet that follows it.
"""

from __future__ import annotations

import shutil
import socket
import struct
import subprocess
import tempfile
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .seeding import substream
from .signal import SAMPLE_RATE, Waveform, clip_array, read_wav, write_wav

MU = 255
CONCEAL_GAIN = 10.0 ** (-3.0 / 20.0)
BAND_HZ = (300.0, 3400.0)
HEADER = struct.Struct(">HHII")
VERSION_FLAGS = 0x8000


class CodecUnavailableError(RuntimeError):
    """The external encoder or decoder executable could not be found or run."""


@dataclass(frozen=True)
class ChannelConfig:
    codec: str = "surrogate"
    loss_rate: float = 0.02
    redundancy: bool = True
    seed: int = 0
    frame_ms: int = 20

    def __post_init__(self):
        if self.codec not in ("surrogate", "external"):
            raise ValueError(f"unknown codec {self.codec!r}")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss_rate must lie in [0, 1], got {self.loss_rate}")
        if self.frame_ms <= 0:
            raise ValueError("frame_ms must be positive")

    @property
    def frame_samples(self) -> int:
        return SAMPLE_RATE * self.frame_ms // 1000


@dataclass(frozen=True)
class EncodedFrame:
    index: int
    payload: bytes
    redundant_copy_of_prev: bytes | None = None


# ---------------------------------------------------------------------------
# surrogate codec


@lru_cache(maxsize=None)
def _bandpass():
    return butter(4, BAND_HZ, btype="bandpass", fs=SAMPLE_RATE, output="sos")


def band_limit(x: np.ndarray) -> np.ndarray:
    """Zero-phase 300-3400 Hz band-pass (4th-order Butterworth run forwards and backwards)."""
    if x.shape[0] <= 27:  # too short for filtfilt's edge padding
        return np.zeros_like(x)
    return sosfiltfilt(_bandpass(), x)


def mulaw_encode(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, -1.0, 1.0)
    y = np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)
    return np.floor((y + 1.0) / 2.0 * MU + 0.5).astype(np.uint8)


def mulaw_decode(codes: np.ndarray) -> np.ndarray:
    y = codes.astype(np.float64) / MU * 2.0 - 1.0
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(MU)) / MU


def surrogate_encode(w: Waveform, cfg: ChannelConfig = ChannelConfig()) -> list[EncodedFrame]:
    n = cfg.frame_samples
    filtered = band_limit(w.samples)
    n_frames = max(1, -(-len(w) // n))
    padded = np.zeros(n_frames * n)
    padded[: len(w)] = filtered
    frames = []
    prev = None
    for i in range(n_frames):
        payload = mulaw_encode(padded[i * n : (i + 1) * n]).tobytes()
        frames.append(EncodedFrame(i, payload, prev if cfg.redundancy else None))
        prev = payload
    if cfg.redundancy:
        # payload-free trailer so that a lost final frame is recoverable too
        frames.append(EncodedFrame(n_frames, b"", prev))
    return frames


def _decode_payload(payload: bytes) -> np.ndarray:
    return mulaw_decode(np.frombuffer(payload, dtype=np.uint8))


def surrogate_decode(frames: list[EncodedFrame], cfg: ChannelConfig = ChannelConfig(), lost=frozenset()) -> Waveform:
    """Decode a frame stream, repairing the frames listed in ``lost``.

    A lost frame is restored from the next frame's redundant copy when that
    frame arrived; otherwise the previous output frame is repeated 3 dB down.
    Frames with an empty payload (the redundancy trailer) decode to nothing.
    """
    if not frames:
        raise ValueError("empty frame stream")
    indices = [f.index for f in frames]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ValueError("frame indices must be strictly increasing")
    lost = set(lost)
    n = cfg.frame_samples
    out = []
    prev = np.zeros(n)
    for k, frame in enumerate(frames):
        if not frame.payload:
            continue
        if frame.index not in lost:
            cur = _decode_payload(frame.payload)
        else:
            nxt = frames[k + 1] if k + 1 < len(frames) else None
            if (
                cfg.redundancy
                and nxt is not None
                and nxt.index == frame.index + 1
                and nxt.index not in lost
                and nxt.redundant_copy_of_prev is not None
            ):
                cur = _decode_payload(nxt.redundant_copy_of_prev)
            else:
                cur = prev * CONCEAL_GAIN
        out.append(cur)
        prev = cur
    return Waveform(np.concatenate(out), SAMPLE_RATE)


def draw_losses(n_frames: int, cfg: ChannelConfig) -> set[int]:
    """Seeded Bernoulli frame-loss pattern."""
    rng = substream(cfg.seed, "channel-loss")
    return set(np.flatnonzero(rng.random(n_frames) < cfg.loss_rate).tolist())


def apply_channel(w: Waveform, cfg: ChannelConfig = ChannelConfig(), tool_paths: dict | None = None) -> Waveform:
    """Encode, drop frames at ``loss_rate``, decode; the output has the input's length."""
    if cfg.codec == "external":
        return external_codec_adapter(w, tool_paths or {}, cfg)
    frames = surrogate_encode(w, cfg)
    out = surrogate_decode(frames, cfg, draw_losses(len(frames), cfg))
    return w.with_samples(out.samples[: len(w)])


def codec_only(cfg: ChannelConfig, tool_paths: dict | None = None) -> Callable[[Waveform], Waveform]:
    """The loss-free distortion map used while crafting."""
    clean = replace(cfg, loss_rate=0.0)
    return lambda w: apply_channel(w, clean, tool_paths)


def codec_aware_craft(
    attack: Callable[[Waveform], "object"],
    x: Waveform,
    cfg_channel: ChannelConfig,
    epsilon: float,
    eta: Callable[[Waveform], Waveform] | None = None,
) -> Waveform:
    """Craft the perturbation on the codec output and apply it to the raw input.

    ``attack`` maps a waveform to an object with an ``adversarial`` waveform
    (an :class:`~voxadv.attacks.AttackResult`).  ``eta`` defaults to the
    loss-free channel described by ``cfg_channel``.
    """
    eta = eta or codec_only(cfg_channel)
    ex = eta(x)
    # adv + (x - eta(x)) == x + delta, and is exact when eta is the identity
    shifted = attack(ex).adversarial.samples + (x.samples - ex.samples)
    return x.with_samples(clip_array(shifted, x.samples, epsilon))


def commutation_ratio(x: Waveform, delta: np.ndarray, cfg: ChannelConfig, eta: Callable | None = None) -> float:
    """||eta(x + d) - eta(x) - d|| / ||d||, with the loss-free channel by default."""
    delta = np.asarray(delta, dtype=np.float64)
    norm = np.linalg.norm(delta)
    if norm == 0:
        raise ValueError("commutation ratio is undefined for a zero perturbation")
    eta = eta or codec_only(cfg)
    diff = eta(x.with_samples(x.samples + delta)).samples - eta(x).samples - delta
    return float(np.linalg.norm(diff) / norm)


# ---------------------------------------------------------------------------
# packets


@dataclass(frozen=True)
class RtpLikePacket:
    sequence_number: int
    timestamp: int
    ssrc: int
    payload: bytes

    def __post_init__(self):
        if not 0 <= self.sequence_number < 1 << 16:
            raise ValueError("sequence number must fit in 16 bits")
        if not 0 <= self.timestamp < 1 << 32 or not 0 <= self.ssrc < 1 << 32:
            raise ValueError("timestamp and ssrc must fit in 32 bits")

    def to_bytes(self) -> bytes:
        return HEADER.pack(VERSION_FLAGS, self.sequence_number, self.timestamp, self.ssrc) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "RtpLikePacket":
        if len(data) < HEADER.size:
            raise ValueError(f"malformed packet: {len(data)} bytes is shorter than the {HEADER.size}-byte header")
        flags, seq, ts, ssrc = HEADER.unpack_from(data)
        if flags != VERSION_FLAGS:
            raise ValueError(f"malformed packet: unexpected version field 0x{flags:04x}")
        return cls(seq, ts, ssrc, bytes(data[HEADER.size :]))


def _frame_payload(frame: EncodedFrame) -> bytes:
    red = frame.redundant_copy_of_prev or b""
    return struct.pack(">H", len(frame.payload)) + frame.payload + red


def packetize(frames: list[EncodedFrame], ssrc: int = 0x5EED, samples_per_frame: int = 320) -> list[RtpLikePacket]:
    return [
        RtpLikePacket(f.index & 0xFFFF, (f.index * samples_per_frame) & 0xFFFFFFFF, ssrc, _frame_payload(f))
        for f in frames
    ]


def _unwrap(seqs: list[int]) -> list[int]:
    if seqs and max(seqs) - min(seqs) > 1 << 15:
        return [s + (1 << 16) if s < 1 << 15 else s for s in seqs]
    return list(seqs)


def depacketize(packets: list[RtpLikePacket], expected_frames: int | None = None) -> tuple[list[EncodedFrame], set[int]]:
    """Order packets by sequence number and list the missing ones.

    Returns the received frames and the set of lost frame indices.  Losses
    after the last received packet are only visible when ``expected_frames``
    is given.  Duplicate packets are ignored.
    """
    by_seq: dict[int, RtpLikePacket] = {}
    for ext, p in zip(_unwrap([p.sequence_number for p in packets]), packets):
        by_seq.setdefault(ext, p)
    frames = []
    for ext in sorted(by_seq):
        body = by_seq[ext].payload
        if len(body) < 2:
            raise ValueError(f"malformed payload in packet {ext}")
        (n,) = struct.unpack_from(">H", body)
        if len(body) < 2 + n:
            raise ValueError(f"truncated payload in packet {ext}")
        red = body[2 + n :]
        frames.append(EncodedFrame(ext, body[2 : 2 + n], red or None))
    last = (expected_frames - 1) if expected_frames is not None else (max(by_seq) if by_seq else -1)
    lost = set(range(last + 1)) - set(by_seq)
    return frames, lost


def fill_lost(frames: list[EncodedFrame], lost: set[int], frame_bytes: int) -> list[EncodedFrame]:
    """Insert silent placeholders for lost indices so the stream is contiguous."""
    have = {f.index: f for f in frames}
    silent = bytes(mulaw_encode(np.zeros(frame_bytes)))
    return [have.get(i, EncodedFrame(i, silent)) for i in sorted(set(have) | set(lost))]


# ---------------------------------------------------------------------------
# UDP transport


def send_udp(packets: list[RtpLikePacket], address: str, port: int) -> None:
    """Send one datagram per packet from a fresh socket."""
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        for p in packets:
            sock.sendto(p.to_bytes(), (address, port))


class UdpReceiver:
    """Bound UDP endpoint collecting packets of one stream until the line goes idle."""

    def __init__(self, port: int, host: str = "127.0.0.1"):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        try:
            self.sock.bind((host, port))
        except OSError:
            self.sock.close()
            raise
        self.port = self.sock.getsockname()[1]

    def collect(self, expected_ssrc: int | None, idle_timeout: float = 1.0, first_timeout: float | None = None) -> list[RtpLikePacket]:
        """Read until no datagram arrives for ``idle_timeout`` seconds.

        Packets from other streams and malformed datagrams are dropped.
        Raises ``TimeoutError`` if nothing at all was received.
        """
        out: list[RtpLikePacket] = []
        self.sock.settimeout(first_timeout if first_timeout is not None else idle_timeout)
        while True:
            try:
                data, _ = self.sock.recvfrom(65535)
            except socket.timeout:
                break
            self.sock.settimeout(idle_timeout)
            try:
                p = RtpLikePacket.from_bytes(data)
            except ValueError:
                continue
            if expected_ssrc is None or p.ssrc == expected_ssrc:
                out.append(p)
        if not out:
            raise TimeoutError(f"no packets received on port {self.port}")
        return out

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def recv_udp(port: int, expected_ssrc: int | None, idle_timeout: float = 1.0, host: str = "127.0.0.1") -> list[RtpLikePacket]:
    with UdpReceiver(port, host) as rx:
        return rx.collect(expected_ssrc, idle_timeout)


# ---------------------------------------------------------------------------
# external codec


DEFAULT_TOOLS = {"encoder": "opusenc", "decoder": "opusdec"}


def _resolve_tool(tool_paths: dict, key: str) -> str:
    name = tool_paths.get(key, DEFAULT_TOOLS[key])
    found = shutil.which(name)
    if found is None:
        raise CodecUnavailableError(f"{key} executable {name!r} not found")
    return found


def external_codec_adapter(w: Waveform, tool_paths: dict, cfg: ChannelConfig) -> Waveform:
    """Round-trip ``w`` through external encoder/decoder executables.

    ``tool_paths`` may name ``encoder`` and ``decoder``; the defaults are the
    opus-tools programs.  The decoder's packet-loss option receives
    ``cfg.loss_rate`` as a percentage.
    """
    enc = _resolve_tool(tool_paths, "encoder")
    dec = _resolve_tool(tool_paths, "decoder")
    with tempfile.TemporaryDirectory() as tmp:
        src, coded, back = Path(tmp) / "in.wav", Path(tmp) / "coded.opus", Path(tmp) / "out.wav"
        write_wav(w, src)
        dec_cmd = [dec, "--rate", str(SAMPLE_RATE)]
        if cfg.loss_rate > 0:
            dec_cmd += ["--packet-loss", f"{100.0 * cfg.loss_rate:g}"]
        for cmd in ([enc, "--quiet", str(src), str(coded)], dec_cmd + ["--quiet", str(coded), str(back)]):
            proc = subprocess.run(cmd, capture_output=True)
            if proc.returncode != 0:
                raise CodecUnavailableError(f"{Path(cmd[0]).name} failed: {proc.stderr.decode(errors='replace').strip()}")
        out = read_wav(back).samples
    fitted = np.zeros(len(w))
    fitted[: min(len(w), out.shape[0])] = out[: len(w)]
    return w.with_samples(fitted)
