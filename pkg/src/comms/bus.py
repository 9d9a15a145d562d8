"""Deterministic simulated message bus with per-link latency, loss and scheduled outages."""
import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

DROPPED = "DROPPED"
LOG_COLUMNS = ["t_sent", "t_delivered", "kind", "from", "to", "seq"]


class UnknownLink(KeyError):
    pass


class PartitionError(ValueError):
    pass


def _merge(intervals: Iterable[Tuple[int, int]]) -> List[Tuple[int, int]]:
    merged: List[Tuple[int, int]] = []
    for start, end in sorted(intervals):
        if end <= start:
            continue
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


@dataclass
class LinkModel:
    """
    One direction of a connection. Outages are half-open step intervals [t_start, t_end),
    kept sorted and non-overlapping.
    """

    src: str
    dst: str
    latency_steps: int = 0
    drop_probability: float = 0.0
    scheduled_outages: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.latency_steps < 0:
            raise ValueError(f"Link {self.src}->{self.dst}: latency must be >= 0")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"Link {self.src}->{self.dst}: drop probability must be in [0, 1]")
        for start, end in self.scheduled_outages:
            if end < start:
                raise ValueError(f"Link {self.src}->{self.dst}: outage ({start}, {end}) ends before it starts")
        self.scheduled_outages = _merge(self.scheduled_outages)

    def add_outage(self, t_start: int, t_end: int) -> None:
        self.scheduled_outages = _merge(self.scheduled_outages + [(t_start, t_end)])

    def in_outage(self, t: int) -> bool:
        return any(start <= t < end for start, end in self.scheduled_outages)


@dataclass
class DeliveryRecord:
    t_sent: int
    kind: str
    sender: str
    receiver: str
    seq: int
    t_delivered: Optional[int] = None
    dropped: bool = False

    def as_row(self) -> Dict[str, Any]:
        delivered: Union[int, str, None] = DROPPED if self.dropped else self.t_delivered
        return {"t_sent": self.t_sent, "t_delivered": delivered, "kind": self.kind,
                "from": self.sender, "to": self.receiver, "seq": self.seq}


class MessageBus:
    """
    Single-threaded bus. Drops are decided at send time with one RNG draw per send, so the
    delivery log depends only on the seed and the send sequence.

    Args:
        links: Initial links
        seed: Seed of the bus RNG
    """

    def __init__(self, links: Iterable[LinkModel] = (), seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._links: Dict[Tuple[str, str], LinkModel] = {}
        self._queue: List[Tuple[int, int, Any, DeliveryRecord]] = []
        self._counter = 0
        self.log: List[DeliveryRecord] = []
        for link in links:
            self.add_link(link)

    def add_link(self, link: LinkModel) -> None:
        self._links[(link.src, link.dst)] = link

    def connect(self, a: str, b: str, latency_steps: int = 0, drop_probability: float = 0.0) -> None:
        """Install links in both directions."""
        self.add_link(LinkModel(a, b, latency_steps, drop_probability))
        self.add_link(LinkModel(b, a, latency_steps, drop_probability))

    def link(self, src: str, dst: str) -> LinkModel:
        try:
            return self._links[(src, dst)]
        except KeyError:
            raise UnknownLink(f"No link from {src} to {dst}")

    def has_link(self, src: str, dst: str) -> bool:
        return (src, dst) in self._links

    @property
    def nodes(self) -> Set[str]:
        return {n for pair in self._links for n in pair}

    def send(self, msg: Any, now: int) -> bool:
        """
        Put a message on its link.

        Args:
            msg: Message with sender, receiver, kind and seq
            now: Current step

        Returns:
            bool: False if the message was dropped

        Raises:
            UnknownLink: If sender and receiver are not linked
        """
        link = self.link(msg.sender, msg.receiver)
        draw = self._rng.random()
        record = DeliveryRecord(now, str(msg.kind), msg.sender, msg.receiver, int(getattr(msg, "seq", 0)))
        self.log.append(record)
        if link.in_outage(now) or draw < link.drop_probability:
            record.dropped = True
            logger.debug(f"Dropped {record.kind} {msg.sender}->{msg.receiver} at t={now}")
            return False
        heapq.heappush(self._queue, (now + link.latency_steps, self._counter, msg, record))
        self._counter += 1
        return True

    def deliver_due(self, now: int) -> List[Any]:
        """Remove and return every message due by now, in (deliver_at, send order)."""
        due = []
        while self._queue and self._queue[0][0] <= now:
            _, _, msg, record = heapq.heappop(self._queue)
            record.t_delivered = now
            due.append(msg)
        return due

    @property
    def pending(self) -> int:
        return len(self._queue)

    def partition(self, node_set_a: Iterable[str], node_set_b: Iterable[str], t_start: int, t_end: int) -> int:
        """
        Cut every link between the two sets for [t_start, t_end).

        Returns:
            int: Number of links affected

        Raises:
            PartitionError: If the sets overlap
        """
        a, b = set(node_set_a), set(node_set_b)
        overlap = a & b
        if overlap:
            raise PartitionError(f"Partition sets overlap: {sorted(overlap)}")
        if t_end <= t_start:
            return 0
        affected = 0
        for (src, dst), link in self._links.items():
            if (src in a and dst in b) or (src in b and dst in a):
                link.add_outage(t_start, t_end)
                affected += 1
        logger.info(f"Partition installed on {affected} links for steps [{t_start}, {t_end})")
        return affected

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.as_row() for r in self.log], columns=LOG_COLUMNS)

    def export_log(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.log_frame().to_csv(path, index=False)
        return path
