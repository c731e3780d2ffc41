"""Deterministic link emulator: loss, duplication, reordering, shaping.

A transmit pass applies, in order: loss (drop), duplication (emit twice),
reordering (hold one datagram and release it after the next), then token
bucket style bandwidth shaping where each datagram occupies the link for
``bits / bandwidth`` and arrives ``base_delay_ms`` after it clears the link.
Everything is driven by one seeded RNG, so a schedule replays identically.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True)
class LinkConfig:
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_prob: float = 0.0
    bandwidth_bps: Optional[int] = None  # None = unlimited
    base_delay_ms: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("loss_prob", "dup_prob", "reorder_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        if self.bandwidth_bps is not None and self.bandwidth_bps <= 0:
            raise ValueError("bandwidth_bps must be positive")


PERFECT_LINK = LinkConfig()


class LinkModel:
    """Mutable emulator state for one directed path."""

    def __init__(self, config: LinkConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.busy_until_ms = 0.0
        self._swap_slot: Optional[bytes] = None
        self.sent = 0
        self.dropped = 0
        self.duplicated = 0
        self.reordered = 0

    def transmit(self, datagram: bytes, now_ms: float) -> list[tuple[float, bytes]]:
        """Returns (deliver_at_ms, datagram) pairs, possibly empty."""
        cfg = self.config
        self.sent += 1

        if cfg.loss_prob and self.rng.random() < cfg.loss_prob:
            self.dropped += 1
            return []

        emits = [datagram]
        if cfg.dup_prob and self.rng.random() < cfg.dup_prob:
            self.duplicated += 1
            emits.append(datagram)

        if self._swap_slot is not None:
            emits.append(self._swap_slot)
            self._swap_slot = None
        elif cfg.reorder_prob and self.rng.random() < cfg.reorder_prob:
            self.reordered += 1
            self._swap_slot = emits.pop()
            if not emits:
                return []

        return [self.shape(emit, now_ms) for emit in emits]

    def shape(self, datagram: bytes, now_ms: float) -> tuple[float, bytes]:
        """Bandwidth shaping only: occupy the link, then add propagation delay."""
        cfg = self.config
        start = max(now_ms, self.busy_until_ms)
        if cfg.bandwidth_bps is not None:
            self.busy_until_ms = start + len(datagram) * 8 * 1000.0 / cfg.bandwidth_bps
        else:
            self.busy_until_ms = start
        return (self.busy_until_ms + cfg.base_delay_ms, datagram)


def link_transmit(link: LinkModel, datagram: bytes, now_ms: float) -> list[tuple[float, bytes]]:
    return link.transmit(datagram, now_ms)
