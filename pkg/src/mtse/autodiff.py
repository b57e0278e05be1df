"""Gradient plumbing on top of torch autograd.

Holds the pieces the rest of the package relies on: scalar-loss backward,
a central finite-difference checker, parameter freezing, the optimizer
factory and the ``MTSE`` named-tensor checkpoint container.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import ContractError, NumericError, ShapeError

MAGIC = b"MTSE"
VERSION = 1


def set_precision(f64: bool) -> torch.dtype:
    dtype = torch.float64 if f64 else torch.float32
    torch.set_default_dtype(dtype)
    return dtype


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))


def backward(loss: torch.Tensor) -> None:
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-5) -> float:
    """Largest relative gap between autograd and central differences over the entries of ``x``.

    The relative error per entry is ``|a - n| / max(1e-8, |a| + |n|)``. ``x``
    is perturbed in place and restored afterwards, so it may be a parameter
    that ``f`` closes over.
    """
    if not torch.all(torch.isfinite(x)):
        raise NumericError("grad_check input contains non-finite values")
    leaf = x.detach().requires_grad_(True) if not x.is_leaf or not x.requires_grad else x
    if leaf.grad is not None:
        leaf.grad = None
    out = f(leaf)
    if out.dim() != 0:
        raise ContractError("grad_check needs a scalar-valued function")
    (analytic,) = torch.autograd.grad(out, leaf, allow_unused=True)
    analytic = torch.zeros_like(leaf) if analytic is None else analytic.detach()

    numeric = torch.zeros_like(leaf)
    flat = leaf.data.view(-1)
    num_flat = numeric.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = f(leaf).item()
            flat[i] = orig - step
            lo = f(leaf).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite function value at entry {i}")
            num_flat[i] = (hi - lo) / (2 * step)
    denom = torch.clamp(analytic.abs() + numeric.abs(), min=1e-8)
    return float(((analytic - numeric).abs() / denom).max())


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def trainable(module: torch.nn.Module) -> list[torch.nn.Parameter]:
    return [p for p in module.parameters() if p.requires_grad]


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def grad_norm(params: Iterable[torch.nn.Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().double().pow(2).sum())
    return total**0.5


# --- checkpoint container -------------------------------------------------


def dumps_tensors(tensors: Mapping[str, torch.Tensor]) -> bytes:
    """Serialize named tensors: header, then name/rank/dims/float32 payload per tensor."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads_tensors(data: bytes) -> dict[str, torch.Tensor]:
    if data[:4] != MAGIC:
        raise ShapeError("not an MTSE checkpoint (bad magic)")
    try:
        return _parse_tensors(data)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ShapeError(f"corrupt checkpoint: {exc}") from exc


def _parse_tensors(data: bytes) -> dict[str, torch.Tensor]:
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ShapeError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        out[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise ShapeError("trailing bytes in checkpoint")
    return out


def save_tensors(path, tensors: Mapping[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_tensors(tensors))
    return path


def load_tensors(path) -> dict[str, torch.Tensor]:
    return loads_tensors(Path(path).read_bytes())


def save_module(path, module: torch.nn.Module) -> Path:
    return save_tensors(path, module.state_dict())


def load_module(path, module: torch.nn.Module) -> torch.nn.Module:
    state = load_tensors(path)
    ref = module.state_dict()
    missing = set(ref) - set(state)
    unexpected = set(state) - set(ref)
    if missing or unexpected:
        raise ShapeError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    module.load_state_dict({k: v.to(ref[k].dtype) for k, v in state.items()})
    return module


def checksum(module_or_tensors) -> str:
    tensors = module_or_tensors.state_dict() if isinstance(module_or_tensors, torch.nn.Module) else module_or_tensors
    return hashlib.sha256(dumps_tensors(tensors)).hexdigest()
