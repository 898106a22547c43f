"""Wikipedia-style knowledge base: ingestion, validation, persistence, segmentation.

A KB is a JSONL file with one entry per line::

    {"entry_id": str, "title": str, "article": str,
     "image_embedding": [float, ...], "title_embedding": [float, ...]}

Entries are held sorted by ``entry_id`` so that the in-memory layout (and thus
every retrieval tie-break) does not depend on the order of lines in the file.
"""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol

import numpy as np

from .errors import BackendError, DataError
from .jsonl import iter_jsonl

logger = logging.getLogger(__name__)

PARAGRAPH_DELIMITER = "\n\n"
DEFAULT_MIN_PARAGRAPH_CHARS = 20
NORM_TOLERANCE = 1e-4

_BLANK_LINE_RE = re.compile(r"\n[ \t\r\f\v]*(?:\n[ \t\r\f\v]*)+")


class EmptyArticleError(DataError):
    pass


@dataclass(frozen=True)
class KbEntry:
    entry_id: str
    title: str
    article: str
    image_embedding: np.ndarray
    title_embedding: np.ndarray

    def to_record(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "title": self.title,
            "article": self.article,
            "image_embedding": self.image_embedding.tolist(),
            "title_embedding": self.title_embedding.tolist(),
        }


@dataclass(frozen=True)
class Paragraph:
    entry_id: str
    paragraph_index: int
    text: str


def _split_blocks(article: str) -> list[str]:
    return [b.strip() for b in _BLANK_LINE_RE.split(article) if b.strip()]


def segment_text(article: str, min_paragraph_chars: int = DEFAULT_MIN_PARAGRAPH_CHARS) -> list[str]:
    """Split text into natural paragraphs on blank lines.

    Blocks shorter than ``min_paragraph_chars`` are merged forward into the
    next block; a short trailing block is merged into the previous one.
    Merged blocks keep the blank-line delimiter between them, so
    ``segment_text(join_paragraphs(segment_text(a))) == segment_text(a)``.
    """
    if not article.strip():
        raise EmptyArticleError("article is empty or whitespace-only")
    out: list[str] = []
    pending: list[str] = []
    for block in _split_blocks(article):
        pending.append(block)
        merged = PARAGRAPH_DELIMITER.join(pending)
        if len(merged) >= min_paragraph_chars:
            out.append(merged)
            pending = []
    if pending:
        tail = PARAGRAPH_DELIMITER.join(pending)
        if out:
            out[-1] = out[-1] + PARAGRAPH_DELIMITER + tail
        else:
            out.append(tail)
    return out


def segment_article(
    article: str,
    entry_id: str = "",
    min_paragraph_chars: int = DEFAULT_MIN_PARAGRAPH_CHARS,
) -> list[Paragraph]:
    return [
        Paragraph(entry_id, j, text)
        for j, text in enumerate(segment_text(article, min_paragraph_chars))
    ]


def join_paragraphs(paragraphs: Iterable[Paragraph | str]) -> str:
    return PARAGRAPH_DELIMITER.join(p if isinstance(p, str) else p.text for p in paragraphs)


class Embedder(Protocol):
    """Source of vectors for KB records that arrive without them."""

    def embed_image(self, image_ref: str) -> list[float]: ...

    def embed_text(self, text: str) -> list[float]: ...


class HttpEmbeddingClient:
    """Client for an embedding service answering ``POST /embed``.

    Request body ``{"kind": "image" | "text", "input": str}``, response
    ``{"embedding": [float, ...]}``.
    """

    def __init__(self, base_url: str, timeout: float = 30.0):
        import httpx

        self._client = httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout)

    def _embed(self, kind: str, value: str) -> list[float]:
        try:
            resp = self._client.post("/embed", json={"kind": kind, "input": value})
        except Exception as exc:  # httpx.HTTPError and socket errors
            raise BackendError(f"embedding service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"embedding service returned HTTP {resp.status_code}")
        emb = resp.json().get("embedding")
        if not isinstance(emb, list):
            raise BackendError("embedding service response lacks 'embedding'")
        return emb

    def embed_image(self, image_ref: str) -> list[float]:
        return self._embed("image", image_ref)

    def embed_text(self, text: str) -> list[float]:
        return self._embed("text", text)


class KnowledgeBase:
    """Immutable collection of :class:`KbEntry` with packed embedding matrices.

    ``scan_count`` counts full retrieval scans; it is the only mutable state
    and is guarded by a lock so concurrent readers may share one instance.
    """

    def __init__(
        self,
        entries: Iterable[KbEntry],
        min_paragraph_chars: int = DEFAULT_MIN_PARAGRAPH_CHARS,
    ):
        ordered = sorted(entries, key=lambda e: e.entry_id)
        if not ordered:
            raise DataError("knowledge base has no entries")
        seen: set[str] = set()
        for e in ordered:
            if e.entry_id in seen:
                raise DataError(f"duplicate entry_id {e.entry_id!r}")
            seen.add(e.entry_id)
        self._entries = tuple(ordered)
        self._index = {e.entry_id: i for i, e in enumerate(ordered)}
        self.image_matrix = np.vstack([e.image_embedding for e in ordered])
        self.title_matrix = np.vstack([e.title_embedding for e in ordered])
        self.image_matrix.setflags(write=False)
        self.title_matrix.setflags(write=False)
        self.image_norms = np.linalg.norm(self.image_matrix, axis=1)
        self.title_norms = np.linalg.norm(self.title_matrix, axis=1)
        self.min_paragraph_chars = min_paragraph_chars
        self._scan_lock = threading.Lock()
        self._scan_count = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def dim(self) -> int:
        return int(self.image_matrix.shape[1])

    @property
    def entries(self) -> tuple[KbEntry, ...]:
        return self._entries

    @property
    def entry_ids(self) -> list[str]:
        return [e.entry_id for e in self._entries]

    def get(self, entry_id: str) -> KbEntry:
        try:
            return self._entries[self._index[entry_id]]
        except KeyError:
            raise KeyError(f"no entry {entry_id!r} in knowledge base") from None

    def paragraphs(self, entry_id: str) -> list[Paragraph]:
        return segment_article(self.get(entry_id).article, entry_id, self.min_paragraph_chars)

    @property
    def scan_count(self) -> int:
        return self._scan_count

    def record_scan(self) -> None:
        with self._scan_lock:
            self._scan_count += 1


def _vector(raw: Any, where: str, field: str) -> np.ndarray:
    if not isinstance(raw, list) or not raw:
        raise DataError(f"{where}: '{field}' must be a non-empty list of numbers")
    try:
        vec = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: '{field}' contains non-numeric values") from exc
    if vec.ndim != 1:
        raise DataError(f"{where}: '{field}' must be a flat list")
    if not np.all(np.isfinite(vec)):
        raise DataError(f"{where}: '{field}' has a non-finite component")
    return vec


def _normalize(vec: np.ndarray, where: str, field: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DataError(f"{where}: '{field}' is the zero vector")
    return vec / norm


def entry_from_record(
    rec: dict[str, Any],
    where: str,
    normalize: bool = True,
    embedder: Embedder | None = None,
) -> KbEntry:
    for key in ("entry_id", "title", "article"):
        if not isinstance(rec.get(key), str):
            raise DataError(f"{where}: missing or non-string '{key}'")
    entry_id, title, article = rec["entry_id"], rec["title"], rec["article"]
    if not entry_id:
        raise DataError(f"{where}: empty entry_id")
    if not title.strip():
        raise DataError(f"{where}: entry {entry_id!r} has an empty title")
    if not article.strip():
        raise DataError(f"{where}: entry {entry_id!r} has an empty article")

    raw_img, raw_title = rec.get("image_embedding"), rec.get("title_embedding")
    if embedder is not None:
        if raw_img is None:
            if not rec.get("image_ref"):
                raise DataError(f"{where}: no image_embedding and no image_ref to embed")
            raw_img = embedder.embed_image(rec["image_ref"])
        if raw_title is None:
            raw_title = embedder.embed_text(title)
    img = _vector(raw_img, where, "image_embedding")
    ttl = _vector(raw_title, where, "title_embedding")
    if img.shape != ttl.shape:
        raise DataError(
            f"{where}: entry {entry_id!r} has image_embedding of dimension {img.size} "
            f"but title_embedding of dimension {ttl.size}"
        )
    if normalize:
        img = _normalize(img, where, "image_embedding")
        ttl = _normalize(ttl, where, "title_embedding")
    img.setflags(write=False)
    ttl.setflags(write=False)
    return KbEntry(entry_id, title, article, img, ttl)


def build_kb(
    records: Iterable[dict[str, Any]],
    normalize: bool = True,
    min_paragraph_chars: int = DEFAULT_MIN_PARAGRAPH_CHARS,
    embedder: Embedder | None = None,
    source: str = "<records>",
) -> KnowledgeBase:
    entries: list[KbEntry] = []
    seen: dict[str, str] = {}
    dim: int | None = None
    for n, rec in enumerate(records, start=1):
        _ingest_one(rec, f"{source}:{n}", normalize, embedder, entries, seen, dim)
        dim = entries[0].image_embedding.size
    return KnowledgeBase(entries, min_paragraph_chars)


def _ingest_one(rec, where, normalize, embedder, entries, seen, dim) -> None:
    entry = entry_from_record(rec, where, normalize, embedder)
    if dim is not None and entry.image_embedding.size != dim:
        raise DataError(
            f"{where}: dimension mismatch for entry {entry.entry_id!r}: "
            f"D={entry.image_embedding.size}, expected D={dim}"
        )
    if entry.entry_id in seen:
        raise DataError(
            f"{where}: duplicate entry_id {entry.entry_id!r} (first seen at {seen[entry.entry_id]})"
        )
    seen[entry.entry_id] = where
    entries.append(entry)


def ingest_kb(
    path: str | Path,
    normalize: bool = True,
    min_paragraph_chars: int = DEFAULT_MIN_PARAGRAPH_CHARS,
    embedder: Embedder | None = None,
    sidecar: str | Path | None = None,
) -> KnowledgeBase:
    """Load and validate a KB JSONL file.

    Errors carry the offending line number. When ``sidecar`` names an existing
    vector cache whose entry ids match the JSONL, vectors are taken from the
    cache; the JSONL is always read for text and stays the source of truth.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"knowledge base file not found: {path}")
    entries: list[KbEntry] = []
    seen: dict[str, str] = {}
    dim: int | None = None
    for lineno, rec in iter_jsonl(path):
        _ingest_one(rec, f"{path}:{lineno}", normalize, embedder, entries, seen, dim)
        dim = entries[0].image_embedding.size
    if not entries:
        raise DataError(f"{path}: knowledge base has no entries")
    kb = KnowledgeBase(entries, min_paragraph_chars)
    logger.info("ingested %d entries (D=%d) from %s", len(kb), kb.dim, path)
    if sidecar is not None and Path(sidecar).exists():
        kb = _apply_sidecar(kb, Path(sidecar), normalize)
    return kb


def write_sidecar(kb: KnowledgeBase, path: str | Path) -> None:
    """Cache the packed vectors as float32 in an ``.npz`` next to the JSONL."""
    np.savez(
        path,
        entry_ids=np.array(kb.entry_ids),
        image=kb.image_matrix.astype(np.float32),
        title=kb.title_matrix.astype(np.float32),
    )


def _apply_sidecar(kb: KnowledgeBase, path: Path, normalize: bool) -> KnowledgeBase:
    with np.load(path) as data:
        ids = [str(x) for x in data["entry_ids"]]
        image, title = data["image"], data["title"]
    if ids != kb.entry_ids or image.shape != kb.image_matrix.shape:
        logger.warning("sidecar %s is stale; using vectors from the JSONL", path)
        return kb
    entries = []
    for row, e in enumerate(kb.entries):
        img = image[row].astype(np.float64)
        ttl = title[row].astype(np.float64)
        if normalize:
            img, ttl = img / np.linalg.norm(img), ttl / np.linalg.norm(ttl)
        entries.append(KbEntry(e.entry_id, e.title, e.article, img, ttl))
    return KnowledgeBase(entries, kb.min_paragraph_chars)


def kb_summary(kb: KnowledgeBase) -> dict[str, Any]:
    n_par = sum(len(kb.paragraphs(eid)) for eid in kb.entry_ids)
    return {"entries": len(kb), "dim": kb.dim, "paragraphs": n_par}

