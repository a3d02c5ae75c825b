"""Dataset manifests: ordered (frame, label, domain, mapping) entries in a TSV file."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

DOMAINS = ("real", "sim")


@dataclass(frozen=True)
class Entry:
    frame: Path
    label: Path
    domain: str
    mapping: str = "identity"

    @property
    def frame_id(self) -> str:
        return self.frame.stem


@dataclass
class DatasetManifest:
    entries: list[Entry] = field(default_factory=list)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def lines(self, base: Path | None = None) -> list[str]:
        out = []
        for e in self.entries:
            f, l = e.frame, e.label
            if base is not None:
                f = Path(os.path.relpath(f, base))
                l = Path(os.path.relpath(l, base))
            out.append(f"{f.as_posix()}\t{l.as_posix()}\t{e.domain}\t{e.mapping}")
        return out

    @property
    def content_hash(self) -> str:
        """sha256 over the ordered entries (absolute paths); the seed is not part of it."""
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode("utf-8") + b"\n")
        return h.hexdigest()

    def frame_ids(self) -> list[str]:
        return [e.frame_id for e in self.entries]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = [] if self.seed is None else [f"# seed={self.seed}"]
        path.write_text("\n".join(header + self.lines(path.parent.resolve())) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path, check_exists: bool = True) -> "DatasetManifest":
        path = Path(path)
        base = path.parent.resolve()
        entries, seed = [], None
        for ln, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith("# seed="):
                    seed = int(line.split("=", 1)[1])
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 4 tab-separated fields")
            frame, label, domain, mapping = parts
            if domain not in DOMAINS:
                raise ValueError(f"{path}:{ln}: unknown domain {domain!r}")
            e = Entry((base / frame).resolve(), (base / label).resolve(), domain, mapping)
            if check_exists and not (e.frame.exists() and e.label.exists()):
                raise FileNotFoundError(f"{path}:{ln}: missing {e.frame} or {e.label}")
            entries.append(e)
        return cls(entries, seed)
