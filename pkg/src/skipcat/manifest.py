"""Manifest describing a compressed layer stored in an SKT1 container.

The manifest is UTF-8 JSON. Tensor names follow
``<group>/<block>/{A,A_prime,perm,B/<member>}``; permutations are stored as
f64 index vectors. Rates are always recomputed from tensor shapes with
:func:`achieved_rate`, so the stored and recomputed values agree exactly.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .compressor import CompressedBlock, CompressedGroup, CompressedLayer
from .errors import ContainerFormatError
from .linalg import Permutation

__all__ = [
    "FORMAT_VERSION",
    "achieved_rate",
    "layer_to_container",
    "layer_from_container",
    "recompute_rates",
    "validate_manifest",
    "write_manifest",
    "read_manifest",
]

FORMAT_VERSION = "1"


def achieved_rate(stored_params: int, dense_params: int) -> float:
    return 1.0 - stored_params / dense_params


def _block_record(gname: str, j: int, block: CompressedBlock, tensors: dict) -> dict:
    prefix = f"{gname}/{j}"
    proj_name = f"{prefix}/A_prime" if block.skipped else f"{prefix}/A"
    tensors[proj_name] = block.projection
    perm_name = None
    if block.skipped:
        perm_name = f"{prefix}/perm"
        tensors[perm_name] = block.perm.indices.astype(np.float64)
    recon = {}
    for m, s in zip(block.members, block.slices):
        recon[m] = f"{prefix}/B/{m}"
        tensors[recon[m]] = s
    return {
        "members": list(block.members),
        "rank": block.rank,
        "skipped": block.skipped,
        "projection": proj_name,
        "perm": perm_name,
        "reconstruction": recon,
        "residual_fro": dict(zip(block.members, block.residual_fro)),
    }


def layer_to_container(layer: CompressedLayer) -> tuple[dict[str, np.ndarray], dict]:
    """Flatten ``layer`` into (tensors, manifest), in group-name order."""
    tensors: dict[str, np.ndarray] = {}
    groups = []
    for gname, g in layer.groups.items():
        blocks = [_block_record(gname, j, b, tensors) for j, b in enumerate(g.blocks)]
        groups.append(
            {
                "name": gname,
                "method": g.method,
                "members": list(g.members),
                "rank": g.rank,
                "d_in": g.d_in,
                "d_outs": list(g.d_outs),
                "fallback": g.fallback,
                "notes": list(g.notes),
                "stored_params": g.param_count,
                "dense_params": g.dense_params,
                "achieved_rate": achieved_rate(g.param_count, g.dense_params),
                "blocks": blocks,
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "method": layer.method,
        "rank": layer.rank,
        "target_rate": layer.target_rate,
        "stored_params": layer.stored_params,
        "dense_params": layer.dense_params,
        "achieved_rate": achieved_rate(layer.stored_params, layer.dense_params),
        "cost": layer.cost_report(),
        "meta": dict(layer.meta),
        "groups": groups,
    }
    return tensors, manifest


def _tensor(tensors: Mapping[str, np.ndarray], name: str) -> np.ndarray:
    if name not in tensors:
        raise ContainerFormatError(f"manifest references missing tensor {name!r}")
    return tensors[name]


def recompute_rates(manifest: dict, tensors: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Achieved rate per group (and ``"layer"``) derived from tensor shapes alone."""
    rates = {}
    total_stored = total_dense = 0
    for g in manifest["groups"]:
        stored = dense = 0
        for b in g["blocks"]:
            proj = _tensor(tensors, b["projection"])
            stored += proj.size
            if b["skipped"]:
                d_in = _tensor(tensors, b["perm"]).size
            else:
                d_in = proj.shape[1]
            for name in b["reconstruction"].values():
                s = _tensor(tensors, name)
                stored += s.size
                dense += s.shape[0] * d_in
        rates[g["name"]] = achieved_rate(stored, dense)
        total_stored += stored
        total_dense += dense
    rates["layer"] = achieved_rate(total_stored, total_dense)
    return rates


def validate_manifest(manifest: dict, tensors: Mapping[str, np.ndarray]) -> None:
    """Raise ContainerFormatError unless references resolve and rates recompute exactly."""
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerFormatError(
            f"format_version: expected {FORMAT_VERSION!r}, got {manifest.get('format_version')!r}"
        )
    rates = recompute_rates(manifest, tensors)
    for g in manifest["groups"]:
        if rates[g["name"]] != g["achieved_rate"]:
            raise ContainerFormatError(
                f"group {g['name']!r} achieved_rate: stored {g['achieved_rate']!r}, "
                f"recomputed {rates[g['name']]!r}"
            )
    if rates["layer"] != manifest["achieved_rate"]:
        raise ContainerFormatError(
            f"achieved_rate: stored {manifest['achieved_rate']!r}, recomputed {rates['layer']!r}"
        )


def layer_from_container(tensors: Mapping[str, np.ndarray], manifest: dict) -> CompressedLayer:
    validate_manifest(manifest, tensors)
    groups = {}
    for g in manifest["groups"]:
        blocks = []
        for b in g["blocks"]:
            perm = None
            if b["skipped"]:
                idx = _tensor(tensors, b["perm"])
                if not np.array_equal(idx, np.round(idx)):
                    raise ContainerFormatError(f"tensor {b['perm']!r}: non-integer permutation")
                perm = Permutation(idx.astype(np.int64))
            members = tuple(b["members"])
            blocks.append(
                CompressedBlock(
                    members=members,
                    slices=tuple(np.asarray(_tensor(tensors, b["reconstruction"][m]), dtype=np.float64) for m in members),
                    projection=np.asarray(_tensor(tensors, b["projection"]), dtype=np.float64),
                    perm=perm,
                    residual_fro=tuple(float(b["residual_fro"][m]) for m in members),
                )
            )
        groups[g["name"]] = CompressedGroup(
            name=g["name"],
            method=g["method"],
            rank=g["rank"],
            blocks=tuple(blocks),
            d_in=g["d_in"],
            d_outs=tuple(g["d_outs"]),
            fallback=g["fallback"],
            notes=tuple(g["notes"]),
        )
    return CompressedLayer(
        manifest["method"], manifest["rank"], groups, manifest.get("target_rate"), dict(manifest.get("meta", {}))
    )


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContainerFormatError(f"manifest {path}: invalid JSON ({exc})") from exc
