"""Chain checkpoint files.

A checkpoint is a zip archive with a ``meta.json`` member and one ``.npy``
member per stored array, laid out as ``chain<i>/<name>.npy``. Member
timestamps are fixed so identical chains give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from ._io import atomic_write_bytes, dumps
from .errors import SchemaError
from .model import Hyperparameters, MixtureState
from .sampler import _STATE_FIELDS, PosteriorChain

FORMAT = "dmmmen-chain"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _add(zf, name, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy(a) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _rng_state_to_json(state: dict) -> dict:
    return json.loads(json.dumps(state))


def checkpoint_bytes(chains: list, extra: dict | None = None) -> bytes:
    meta = {"format": FORMAT, "version": VERSION, "extra": extra or {}, "chains": []}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for i, ch in enumerate(chains):
            r = ch.resume
            entry = {
                "hp": ch.hp.to_dict(),
                "seed": ch.seed,
                "chain_index": ch.chain_index,
                "n_draws": len(ch),
                "sigma2_accept_rate": ch.sigma2_accept_rate,
                "resume": None,
            }
            prefix = f"chain{i}/"
            for k in _STATE_FIELDS:
                _add(zf, f"{prefix}{k}.npy", _npy(ch.samples[k]))
            _add(zf, f"{prefix}loglik.npy", _npy(ch.loglik))
            _add(zf, f"{prefix}accept_rates.npy", _npy(ch.accept_rates))
            if r:
                entry["resume"] = {
                    "rng_state": _rng_state_to_json(r["rng_state"]),
                    "sweeps_done": int(r["sweeps_done"]),
                    "lambda_trials": int(r["lambda_trials"]),
                    "sigma2_accepts": float(r["sigma2_accepts"]),
                    "sigma2_trials": int(r["sigma2_trials"]),
                    "alpha": float(r["state"].alpha),
                }
                _add(zf, f"{prefix}resume/log_steps.npy", _npy(r["log_steps"]))
                _add(zf, f"{prefix}resume/lambda_accepts.npy", _npy(r["lambda_accepts"]))
                for k in _STATE_FIELDS:
                    if k != "alpha":
                        _add(zf, f"{prefix}resume/{k}.npy", _npy(getattr(r["state"], k)))
            meta["chains"].append(entry)
        _add(zf, "meta.json", dumps(meta).encode())
    return buf.getvalue()


def save_checkpoint(chains, path, extra: dict | None = None) -> None:
    if isinstance(chains, PosteriorChain):
        chains = [chains]
    atomic_write_bytes(path, checkpoint_bytes(chains, extra))


def load_checkpoint(path) -> tuple:
    """Return ``(chains, extra)`` from a checkpoint file."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise SchemaError(f"{path}: not a chain checkpoint ({exc})") from None
    with zf:
        names = set(zf.namelist())
        if "meta.json" not in names:
            raise SchemaError(f"{path}: missing meta.json")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise SchemaError(f"{path}: unexpected format {meta.get('format')!r}")

        def arr(name):
            if name not in names:
                raise SchemaError(f"{path}: missing member {name}")
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        chains = []
        for i, entry in enumerate(meta["chains"]):
            prefix = f"chain{i}/"
            samples = {k: arr(f"{prefix}{k}.npy") for k in _STATE_FIELDS}
            resume = {}
            if entry.get("resume"):
                r = entry["resume"]
                st = {k: arr(f"{prefix}resume/{k}.npy") for k in _STATE_FIELDS if k != "alpha"}
                resume = {
                    "state": MixtureState(alpha=r["alpha"], **st),
                    "rng_state": r["rng_state"],
                    "log_steps": arr(f"{prefix}resume/log_steps.npy"),
                    "lambda_accepts": arr(f"{prefix}resume/lambda_accepts.npy"),
                    "sweeps_done": r["sweeps_done"],
                    "lambda_trials": r["lambda_trials"],
                    "sigma2_accepts": r["sigma2_accepts"],
                    "sigma2_trials": r["sigma2_trials"],
                }
            chains.append(PosteriorChain(
                hp=Hyperparameters.from_dict(entry["hp"]), seed=entry["seed"],
                samples=samples, loglik=arr(f"{prefix}loglik.npy"),
                accept_rates=arr(f"{prefix}accept_rates.npy"),
                sigma2_accept_rate=entry["sigma2_accept_rate"],
                chain_index=entry["chain_index"], resume=resume))
    return chains, meta.get("extra", {})
