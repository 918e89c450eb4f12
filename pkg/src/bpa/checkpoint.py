"""Single-file checkpoint archives.

A checkpoint is a zip holding ``header.json`` plus one ``.npy`` blob per
parameter/buffer tensor (``params/<module>/<name>.npy``). Optimizer and RNG
states that are not flat tensors go in ``state/<name>.pt``.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _fixed_info(name: str) -> zipfile.ZipInfo:
    # constant timestamp keeps archives byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    return info


def save_archive(path: str | Path, header: dict, modules: dict[str, torch.nn.Module], state: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_fixed_info("header.json"), json.dumps({**header, "format_version": FORMAT_VERSION}, sort_keys=True, indent=1))
        for mod_name, module in modules.items():
            for key, tensor in module.state_dict().items():
                zf.writestr(_fixed_info(f"params/{mod_name}/{key}.npy"), _npy_bytes(tensor))
        for name, obj in (state or {}).items():
            buf = io.BytesIO()
            torch.save(obj, buf)
            zf.writestr(_fixed_info(f"state/{name}.pt"), buf.getvalue())


def read_header(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("header.json"))


def load_archive(path: str | Path, modules: dict[str, torch.nn.Module]) -> tuple[dict, dict]:
    """Fill ``modules`` in place; return ``(header, state)``."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        names = zf.namelist()
        for mod_name, module in modules.items():
            prefix = f"params/{mod_name}/"
            sd = {}
            for n in names:
                if n.startswith(prefix):
                    arr = np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                    sd[n[len(prefix):-4]] = torch.from_numpy(arr)
            module.load_state_dict(sd)
        state = {}
        for n in names:
            if n.startswith("state/"):
                state[n[len("state/"):-3]] = torch.load(io.BytesIO(zf.read(n)), weights_only=False)
    return header, state
