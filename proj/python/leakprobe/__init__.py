"""Membership-inference audits for fine-tuned language models.

Thin wrapper over the native core. Trace files are passed as JSONL text or paths.
"""

from __future__ import annotations

import csv
import io
import json
import os
from typing import Sequence

from ._leakprobe import (
    AttackError,
    ConfigError,
    LeakprobeError,
    ParseError,
    ValidationError,
    bootstrap_ci,
    gap,
    normalize_traces,
    perplexity,
    roc_auc,
    run_cli,
    version,
    zlib_entropy,
)
from . import _leakprobe

__version__ = version()

__all__ = [
    "AttackError",
    "ConfigError",
    "LeakprobeError",
    "ParseError",
    "ValidationError",
    "bootstrap_ci",
    "evaluate",
    "gap",
    "normalize_traces",
    "perplexity",
    "roc_auc",
    "run_cli",
    "score",
    "version",
    "zlib_entropy",
]


def _text(traces: str | os.PathLike) -> str:
    if isinstance(traces, os.PathLike) or (isinstance(traces, str) and "\n" not in traces and os.path.exists(traces)):
        with open(traces, encoding="utf-8") as f:
            return f.read()
    return str(traces)


def score(traces: str | os.PathLike, k_percent: float = 20.0, zlib_literal: bool = False,
          shadow_columns: bool = True) -> list[dict[str, str]]:
    """Per-sample attack scores. Empty cells mean the attack was not computable."""
    out = _leakprobe.score_traces(_text(traces), k_percent, zlib_literal, shadow_columns)
    return list(csv.DictReader(io.StringIO(out)))


def evaluate(traces: str | os.PathLike, bootstrap: int = 0, seed: int = 0, spv_group: str = "referenced",
             ppl_exp: bool = False, k_percent: float = 20.0) -> dict:
    """AUC per attack, group bests and utility, as a dict."""
    return json.loads(_leakprobe.evaluate_traces(_text(traces), bootstrap, seed, spv_group, ppl_exp, k_percent))


def main(argv: Sequence[str] | None = None) -> int:
    import sys

    code, out, err = run_cli(list(sys.argv[1:] if argv is None else argv))
    sys.stdout.write(out)
    sys.stderr.write(err)
    return code
