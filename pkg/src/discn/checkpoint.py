"""Weight checkpoints: one DSCN-T1 file per named tensor plus a JSON manifest."""
import json
from pathlib import Path

import torch

from .errors import IntegrityError
from .head import HeadConfig
from .model import DISCNModel
from .saa import SaaConfig
from .tensorio import load_tensor, save_tensor

CHECKPOINT_SCHEMA = "discn-ckpt/1"


def save_checkpoint(model: DISCNModel, directory, extra=None) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    names = []
    for name, t in state.items():
        if t.dtype in (torch.long, torch.int64):   # BN num_batches_tracked
            t = t.float()
        save_tensor(root / f"{name}.dscnt", t)
        names.append(name)
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "variant": model.variant,
        "saa": model.saa_cfg.to_dict(),
        "head": model.head_cfg.to_dict(),
        "tensors": names,
        "extra": extra or {},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_checkpoint(directory) -> DISCNModel:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise IntegrityError(f"{root}: unsupported checkpoint schema {manifest.get('schema')!r}")
    model = DISCNModel(SaaConfig.from_dict(manifest["saa"]), HeadConfig.from_dict(manifest["head"]),
                       manifest["variant"])
    ref = model.state_dict()
    if sorted(manifest["tensors"]) != sorted(ref):
        raise IntegrityError(f"{root}: checkpoint tensors do not match the model layout")
    state = {}
    for name in manifest["tensors"]:
        t = load_tensor(root / f"{name}.dscnt")
        if t.shape != ref[name].shape:
            raise IntegrityError(f"{root / name}: shape {tuple(t.shape)} != {tuple(ref[name].shape)}")
        state[name] = t.to(ref[name].dtype)
    model.load_state_dict(state)
    return model
