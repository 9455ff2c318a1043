"""Versioned checkpoint archive: named numeric arrays plus a JSON manifest.

Layout is a plain zip holding one ``.npy`` per array and a ``manifest.json``
listing format version, array shapes/dtypes, and arbitrary metadata (model
configuration, identity count, training step). Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

FORMAT = "handprior-checkpoint"
VERSION = 1


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "arrays": {
            name: {"shape": list(a.shape), "dtype": str(a.dtype)} for name, a in arrays.items()
        },
        "meta": meta,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr))
            zf.writestr(f"arrays/{name}.npy", buf.getvalue())


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(Path(path), "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise ValueError(f"{path} is not a checkpoint archive")
        if manifest.get("version") > VERSION:
            raise ValueError(f"checkpoint version {manifest['version']} is newer than supported {VERSION}")
        arrays = {}
        for name, info in manifest["arrays"].items():
            arr = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")))
            if list(arr.shape) != info["shape"]:
                raise ValueError(f"array {name} shape mismatch against manifest")
            arrays[name] = arr
    return arrays, manifest["meta"]


def _template_arrays(template) -> dict[str, np.ndarray]:
    return {
        "template.vertices": template.vertices.detach().cpu().numpy(),
        "template.faces": template.faces,
        "template.skinning_weights": template.skinning_weights.detach().cpu().numpy(),
        "template.rest_joints": template.rest_joints.detach().cpu().numpy(),
        "template.shape_basis": template.shape_basis.detach().cpu().numpy(),
        "template.joint_parents": template.joint_parents,
    }


def save_model(path, model, extra_meta: dict | None = None) -> None:
    """Serialize a PriorModel: parameters, anchors, template, and config."""
    from .fields import ModelConfig  # local import avoids a cycle

    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"param.{name}"] = tensor.detach().cpu().numpy()
    for field_name in ("albedo_field", "shadow_field"):
        for lvl, aset in enumerate(getattr(model, field_name).anchor_sets):
            arrays[f"anchors.{field_name}.{lvl}.faces"] = aset.face_indices
            arrays[f"anchors.{field_name}.{lvl}.bary"] = aset.barycentric
    occ = model.occupancy_field.anchors
    arrays["anchors.occupancy.faces"] = occ.face_indices
    arrays["anchors.occupancy.bary"] = occ.barycentric
    arrays.update(_template_arrays(model.template))
    meta = {
        "model_config": _config_to_dict(model.config),
        "num_identities": model.num_identities,
        "joint_names": model.template.joint_names,
        "dtype": str(model.identity_codes.dtype).split(".")[-1],
    }
    if extra_meta:
        meta.update(extra_meta)
    save_archive(path, arrays, meta)


def _config_to_dict(config) -> dict:
    d = asdict(config)
    return d


def _config_from_dict(d: dict):
    from .fields import FieldConfig, ModelConfig, OccupancyConfig

    albedo = FieldConfig(**{**d["albedo"], "anchor_counts": tuple(d["albedo"]["anchor_counts"])})
    shadow = FieldConfig(**{**d["shadow"], "anchor_counts": tuple(d["shadow"]["anchor_counts"])})
    occ = OccupancyConfig(**d["occupancy"])
    rest = {k: v for k, v in d.items() if k not in ("albedo", "shadow", "occupancy")}
    return ModelConfig(albedo=albedo, shadow=shadow, occupancy=occ, **rest)


def load_model(path):
    """Rebuild a PriorModel from an archive; returns (model, meta)."""
    from .fields import PriorModel
    from .mesh import AnchorSet, TemplateMesh

    arrays, meta = load_archive(path)
    dtype = getattr(torch, meta["dtype"])
    template = TemplateMesh(
        vertices=torch.as_tensor(arrays["template.vertices"], dtype=torch.float64),
        faces=arrays["template.faces"],
        skinning_weights=torch.as_tensor(arrays["template.skinning_weights"], dtype=torch.float64),
        rest_joints=torch.as_tensor(arrays["template.rest_joints"], dtype=torch.float64),
        shape_basis=torch.as_tensor(arrays["template.shape_basis"], dtype=torch.float64),
        joint_parents=arrays["template.joint_parents"],
        joint_names=list(meta["joint_names"]),
    )
    config = _config_from_dict(meta["model_config"])
    model = PriorModel(template, config, meta["num_identities"], dtype=dtype)
    for field_name in ("albedo_field", "shadow_field"):
        for lvl, aset in enumerate(getattr(model, field_name).anchor_sets):
            new = AnchorSet(
                face_indices=arrays[f"anchors.{field_name}.{lvl}.faces"],
                barycentric=arrays[f"anchors.{field_name}.{lvl}.bary"],
                encodings=aset.encodings,
                resolution_level=lvl,
            )
            getattr(model, field_name).anchor_sets[lvl] = new
    model.occupancy_field.anchors = AnchorSet(
        face_indices=arrays["anchors.occupancy.faces"],
        barycentric=arrays["anchors.occupancy.bary"],
        encodings=None,
        resolution_level=-1,
    )
    state = {
        name[len("param."):]: torch.as_tensor(arr)
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    model.load_state_dict(state)
    return model, meta
