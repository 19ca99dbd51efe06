"""Frequency-selective multi-user channels and their per-bin matrix view.

Transform conventions
---------------------
Two DFT scalings are used, and they are deliberately different:

* Channel eigenvalues are the *unnormalized* DFT of the zero-padded impulse
  response, ``lam = fft(h, N)``.  These are exactly the eigenvalues of the
  circulant matrix built from ``h``.
* Signals (symbols, precoded samples, noise) move between time and frequency
  with the *unitary* DFT (``norm="ortho"``), so ``sum |x|**2 == sum |fd(x)|**2``
  and white noise keeps its variance in every bin.

With these two choices circular convolution in time becomes per-bin
multiplication, ``fd(h (*) x) == fft(h, N) * fd(x)``.

Array layout: impulses are ``(M, K, L_h)``; per-bin matrices are ``(N, M, K)``
with ``bins[n, m, k]`` the response from antenna ``m`` to user ``k`` in bin
``n``.  Antenna and user indices are zero-based.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import complex_normal
from .errors import ConfigError, DimensionError

DEFAULT_ANTENNA_POWER_RANGE = (0.1, 2.0)


def fd(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Unitary DFT of a signal along ``axis``."""
    return np.fft.fft(x, axis=axis, norm="ortho")


def td(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Inverse of :func:`fd`."""
    return np.fft.ifft(x, axis=axis, norm="ortho")


@dataclass(frozen=True)
class PowerDelayProfile:
    length: int
    rolloff: float = 25.0
    kind: str = "exponential"

    def __post_init__(self):
        if self.kind != "exponential":
            raise ConfigError(f"unsupported power delay profile {self.kind!r}")
        if int(self.length) != self.length or self.length < 1:
            raise ConfigError(f"PDP length must be a positive integer, got {self.length}")
        if not self.rolloff > 0:
            raise ConfigError(f"PDP rolloff must be positive, got {self.rolloff}")

    def tap_variances(self) -> np.ndarray:
        """Per-tap variances ``exp(-l/rolloff)``, normalized to sum to one."""
        v = np.exp(-np.arange(self.length) / self.rolloff)
        return v / v.sum()


@dataclass(frozen=True)
class ChannelImpulse:
    taps: np.ndarray
    antenna: int
    user: int

    @property
    def length(self) -> int:
        return self.taps.shape[-1]


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """Immutable channel draw: impulse responses plus their per-bin matrices."""

    impulses: np.ndarray
    fft_size: int
    seed: int | None = None
    bins: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        imp = np.array(self.impulses, dtype=complex)
        if imp.ndim != 3:
            raise DimensionError(f"impulses must be (M, K, L_h), got shape {imp.shape}")
        bins = to_frequency(imp, self.fft_size)
        imp.setflags(write=False)
        bins.setflags(write=False)
        object.__setattr__(self, "impulses", imp)
        object.__setattr__(self, "bins", bins)

    @property
    def M(self) -> int:
        return self.impulses.shape[0]

    @property
    def K(self) -> int:
        return self.impulses.shape[1]

    @property
    def L_h(self) -> int:
        return self.impulses.shape[2]

    def impulse(self, m: int, k: int) -> ChannelImpulse:
        return ChannelImpulse(self.impulses[m, k], m, k)

    def user_power(self) -> np.ndarray:
        """Average impulse energy over antennas, one value per user."""
        return np.mean(np.sum(np.abs(self.impulses) ** 2, axis=-1), axis=0)


def to_frequency(impulses: np.ndarray, fft_size: int) -> np.ndarray:
    """N-point (unnormalized) DFT of every impulse, laid out as ``(N, M, K)``."""
    impulses = np.asarray(impulses)
    if impulses.shape[-1] > fft_size:
        raise DimensionError(
            f"impulse length {impulses.shape[-1]} exceeds FFT size {fft_size}"
        )
    # contiguous bins keep the batched matmuls on the BLAS path
    return np.ascontiguousarray(np.fft.fft(impulses, n=fft_size, axis=-1).transpose(2, 0, 1))


def circular_convolve(x: np.ndarray, impulse: ChannelImpulse | np.ndarray) -> np.ndarray:
    """Apply the circulant channel matrix of ``impulse`` to the length-N vector ``x``.

    Computed directly in the time domain as a sum of cyclic shifts, so it is
    independent of the FFT path it is used to validate.
    """
    taps = impulse.taps if isinstance(impulse, ChannelImpulse) else np.asarray(impulse)
    x = np.asarray(x)
    if x.ndim != 1:
        raise DimensionError(f"x must be a vector, got shape {x.shape}")
    if taps.shape[-1] > x.shape[0]:
        raise DimensionError(f"impulse length {taps.shape[-1]} exceeds len(x)={x.shape[0]}")
    y = np.zeros(x.shape[0], dtype=np.result_type(x, taps, complex))
    for lag, tap in enumerate(taps):
        if tap != 0:
            y += tap * np.roll(x, lag)
    return y


def generate_channel(
    M: int,
    K: int,
    N: int,
    pdp: PowerDelayProfile,
    seed: int | np.random.Generator,
    antenna_power_range: tuple[float, float] | None = DEFAULT_ANTENNA_POWER_RANGE,
) -> ChannelRealization:
    """Draw a random multi-user channel.

    Taps are circular complex Gaussian with the PDP's variances.  With
    ``antenna_power_range=(lo, hi)`` each antenna/user pair is rescaled to a
    target power drawn uniformly on ``[lo, hi]``, then every user's targets
    are divided by their mean so the per-user average over antennas is one.
    With ``None`` the Gaussian draws keep their own powers and only the
    per-user average is normalized.
    """
    if not (int(M) == M and int(K) == K and int(N) == N):
        raise ConfigError("M, K and N must be integers")
    if not M >= K >= 1:
        raise ConfigError(f"need M >= K >= 1, got M={M}, K={K}")
    if pdp.length > N:
        raise ConfigError(f"channel length {pdp.length} exceeds frame length N={N}")

    rng = np.random.default_rng(seed)
    taps = complex_normal(rng, (M, K, pdp.length)) * np.sqrt(pdp.tap_variances())
    energy = np.sum(np.abs(taps) ** 2, axis=-1)

    if antenna_power_range is None:
        target = energy
    else:
        lo, hi = antenna_power_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid antenna power range {antenna_power_range}")
        target = rng.uniform(lo, hi, size=(M, K))
    target = target / target.mean(axis=0)
    taps *= np.sqrt(target / energy)[..., None]

    return ChannelRealization(
        taps, N, seed=int(seed) if isinstance(seed, (int, np.integer)) else None
    )


# Debug dump: little-endian header "<4sIIIIq" = (b"RZFC", M, K, N, L_h, seed or -1),
# followed by M*K*L_h complex taps in (M, K, L_h) C order as interleaved float64 re/im.
_DUMP_MAGIC = b"RZFC"
_DUMP_HEADER = struct.Struct("<4sIIIIq")


def save_channel(realization: ChannelRealization, path: str | Path) -> Path:
    path = Path(path)
    seed = -1 if realization.seed is None else realization.seed
    header = _DUMP_HEADER.pack(
        _DUMP_MAGIC, realization.M, realization.K, realization.fft_size, realization.L_h, seed
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(realization.impulses.astype("<c16").tobytes())
    return path


def load_channel(path: str | Path) -> ChannelRealization:
    raw = Path(path).read_bytes()
    magic, M, K, N, L, seed = _DUMP_HEADER.unpack_from(raw)
    if magic != _DUMP_MAGIC:
        raise ConfigError(f"{path}: not a channel dump")
    taps = np.frombuffer(raw, dtype="<c16", offset=_DUMP_HEADER.size, count=M * K * L)
    return ChannelRealization(taps.reshape(M, K, L), N, seed=None if seed < 0 else seed)
