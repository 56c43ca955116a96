"""Versioned ``.npz`` container for centroid banks and extractor parameters.

Arrays are stored as raw float64, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import MlpSpec, ParamState
from .prototypes import CentroidBank

FORMAT = "protonesy-checkpoint"
VERSION = 1


def save_checkpoint(path, banks: dict[str, CentroidBank] | None = None,
                    extractors: dict[str, tuple[MlpSpec, ParamState]] | None = None,
                    meta: dict | None = None) -> None:
    banks = banks or {}
    extractors = extractors or {}
    arrays = {}
    header = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "banks": {}, "extractors": {}}
    for name, bank in banks.items():
        header["banks"][name] = {"k": bank.k, "status": bank.status}
        for g, c in enumerate(bank.centroids):
            arrays[f"bank/{name}/{g}"] = c
    for name, (spec, params) in extractors.items():
        header["extractors"][name] = {
            "input_dim": spec.input_dim, "hidden": list(spec.hidden),
            "output_dim": spec.output_dim, "seed": spec.seed,
            "layers": len(params.weights), "step": params.step,
        }
        for slot in ("weights", "biases", "m_w", "m_b", "v_w", "v_b"):
            for i, a in enumerate(getattr(params, slot)):
                arrays[f"net/{name}/{slot}/{i}"] = a
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(banks, extractors, meta)`` as saved by :func:`save_checkpoint`."""
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} file")
        if header.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        banks = {}
        for name, info in header["banks"].items():
            cents = [data[f"bank/{name}/{g}"].copy() for g in range(info["k"])]
            banks[name] = CentroidBank(cents, [list(s) for s in info["status"]])
        extractors = {}
        for name, info in header["extractors"].items():
            spec = MlpSpec(info["input_dim"], tuple(info["hidden"]), info["output_dim"], info["seed"])
            slots = {
                slot: [data[f"net/{name}/{slot}/{i}"].copy() for i in range(info["layers"])]
                for slot in ("weights", "biases", "m_w", "m_b", "v_w", "v_b")
            }
            extractors[name] = (spec, ParamState(step=info["step"], **slots))
    return banks, extractors, header["meta"]
