"""Catalog of distinct channels and the ordered channel set of each dataset."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path


class UnknownChannelSetError(LookupError):
    pass


class UnknownChannelError(LookupError):
    pass


@dataclass(frozen=True, order=True)
class ChannelId:
    dataset: str
    index: int
    alias: str = ""

    def __str__(self) -> str:
        return f"{self.dataset}:{self.index}"


class ChannelRegistry:
    """Ordered registry of ChannelIds grouped by dataset.

    With ``share_aliases`` set, channels carrying the same non-empty alias map
    to one parameter key, so strategies keyed by channel share their weights.
    """

    def __init__(self, share_aliases: bool = False):
        self.share_aliases = share_aliases
        self.entries: list[ChannelId] = []
        self.datasets: dict[str, list[ChannelId]] = {}

    def add(self, dataset: str, index: int, alias: str = "") -> ChannelId:
        cid = ChannelId(dataset, int(index), alias or "")
        if any(e.dataset == cid.dataset and e.index == cid.index for e in self.entries):
            raise ValueError(f"duplicate channel {cid}")
        self.entries.append(cid)
        self.datasets.setdefault(dataset, []).append(cid)
        return cid

    def add_dataset(self, dataset: str, aliases) -> list[ChannelId]:
        for i, alias in enumerate(aliases):
            self.add(dataset, i, alias)
        return self.channel_set(dataset)

    def channel_set(self, dataset: str) -> list[ChannelId]:
        try:
            return list(self.datasets[dataset])
        except KeyError:
            raise UnknownChannelSetError(f"channel set {dataset!r} is not registered") from None

    def channel_count(self, dataset: str) -> int:
        return len(self.channel_set(dataset))

    def __contains__(self, dataset: str) -> bool:
        return dataset in self.datasets

    def param_key(self, cid: ChannelId) -> str:
        if self.share_aliases and cid.alias:
            return f"alias={cid.alias}"
        return str(cid)

    def distinct_keys(self) -> list[str]:
        seen: dict[str, None] = {}
        for cid in self.entries:
            seen.setdefault(self.param_key(cid), None)
        return list(seen)

    # -- persistence -----------------------------------------------------
    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "channel_index", "alias"])
            for cid in self.entries:
                w.writerow([cid.dataset, cid.index, cid.alias])

    @classmethod
    def from_csv(cls, path, share_aliases: bool = False) -> "ChannelRegistry":
        reg = cls(share_aliases=share_aliases)
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in sorted(rows, key=lambda r: (r["dataset"], int(r["channel_index"]))):
            reg.add(row["dataset"], int(row["channel_index"]), row.get("alias") or "")
        return reg


def chammi_registry(share_aliases: bool = False) -> ChannelRegistry:
    """WTC (3), HPA (4) and CP (5) channels: 12 distinct entries."""
    reg = ChannelRegistry(share_aliases=share_aliases)
    reg.add_dataset("WTC", ["membrane", "nucleus", "protein"])
    reg.add_dataset("HPA", ["microtubules", "protein", "nucleus", "er"])
    reg.add_dataset("CP", ["nucleus", "er", "rna", "agp", "mito"])
    return reg
