"""Overlapping slow-time blocks whose kept interiors tile the series."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import InvalidParameterError

__all__ = ["TimeBlock", "time_block_scheduler"]


@dataclass(frozen=True)
class TimeBlock:
    start: int
    stop: int
    keep_start: int
    keep_stop: int

    @property
    def window(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def keep_local(self) -> slice:
        """Kept frames relative to the block start."""
        return slice(self.keep_start - self.start, self.keep_stop - self.start)


def time_block_scheduler(total_frames: int, block_len: int, overlap_discard: int):
    """Split ``total_frames`` into blocks of ``block_len`` frames.

    Consecutive blocks overlap by ``2 * overlap_discard`` frames and each
    block drops ``overlap_discard`` frames at an interior edge.  The last
    block is shifted back to end at the series end, so its leading overlap
    may be larger; kept segments are contiguous and disjoint.
    """
    total_frames, block_len, d = int(total_frames), int(block_len), int(overlap_discard)
    if total_frames < 1 or block_len < 1 or d < 0:
        raise InvalidParameterError("frame counts must be positive and discard non-negative")
    if block_len <= 2 * d:
        raise InvalidParameterError("block_len must exceed twice overlap_discard")
    if total_frames <= block_len:
        return [TimeBlock(0, total_frames, 0, total_frames)]
    stride = block_len - 2 * d
    starts = list(range(0, total_frames - block_len, stride)) + [total_frames - block_len]
    blocks = []
    keep = 0
    for i, s in enumerate(starts):
        last = i == len(starts) - 1
        stop = s + block_len
        keep_stop = total_frames if last else stop - d
        if keep_stop <= keep:
            continue
        blocks.append(TimeBlock(s, stop, keep, keep_stop))
        keep = keep_stop
    return blocks
