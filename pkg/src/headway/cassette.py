"""Record/replay cassettes for the two service clients.

A cassette is a JSON file keyed by the sha256 of the canonical request body.
Recorded entries hold the response payload plus the observed latency so
replayed runs are deterministic in virtual time.
"""

import hashlib
import json


class CassetteMiss(KeyError):
    """Replay requested for a request the cassette has never seen."""

    def __init__(self, digest: str, request: dict):
        kind = request.get("kind", "request")
        hint = request.get("prompt") or request.get("image_id") or ""
        if isinstance(hint, str) and len(hint) > 80:
            hint = hint[:77] + "..."
        super().__init__(f"cassette has no entry for {kind} {digest[:12]} ({hint!r})")
        self.digest = digest
        self.request = request


def request_digest(request: dict) -> str:
    canonical = json.dumps(request, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Cassette:
    def __init__(self, entries=None, path=None):
        self.entries = dict(entries or {})
        self.path = path

    @classmethod
    def load(cls, path) -> "Cassette":
        with open(path, "r") as fh:
            doc = json.load(fh)
        return cls(entries=doc.get("entries", {}), path=path)

    def save(self, path=None) -> None:
        path = path or self.path
        if path is None:
            raise ValueError("no path to save cassette to")
        with open(path, "w") as fh:
            json.dump({"entries": self.entries}, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def record(self, request: dict, response: dict, latency: float) -> str:
        digest = request_digest(request)
        self.entries[digest] = {
            "request": request,
            "response": response,
            "latency": float(latency),
        }
        return digest

    def replay(self, request: dict):
        digest = request_digest(request)
        entry = self.entries.get(digest)
        if entry is None:
            raise CassetteMiss(digest, request)
        return entry["response"], float(entry["latency"])

    def __len__(self) -> int:
        return len(self.entries)
