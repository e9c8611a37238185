# Hashing utilities
import hashlib
import json


def scenario_digest(document: dict) -> str:
    raw = json.dumps(document, sort_keys=True, separators=(",", ":"))
    hashed = hashlib.sha256(raw.encode("utf-8")).hexdigest()
    return hashed[:16]
