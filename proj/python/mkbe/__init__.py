"""Multimodal knowledge base embeddings."""

from ._mkbe import (
    Checkpoint,
    InputError,
    KB,
    StateError,
    build_kb,
    git_blob_sha1,
    run,
)

__all__ = ["Checkpoint", "InputError", "KB", "StateError", "build_kb", "git_blob_sha1", "run"]
