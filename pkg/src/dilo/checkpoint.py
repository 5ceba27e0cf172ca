"""Bundle and surrogate checkpoints on top of the tensor-file manifest."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from .diffusion import DiffusionSchedule
from .io import ManifestError, read_manifest, write_manifest
from .networks import MlpArch, ModelBundle, SpectralArch
from .surrogate import NeuralSurrogate


def _mlp_desc(arch: MlpArch) -> dict:
    return {"widths": list(arch.widths), "activation": arch.activation, "zero_last": arch.zero_last}


def _mlp(desc: dict) -> MlpArch:
    return MlpArch(tuple(desc["widths"]), desc["activation"], desc["zero_last"])


def _flatten(prefix: str, params) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": np.asarray(p) for k, p in enumerate(params)}


def _collect(tensors: dict, prefix: str) -> list[np.ndarray]:
    keys = [k for k in tensors if k.split(".", 1)[0] == prefix]
    return [tensors[f"{prefix}.{i}"] for i in range(len(keys))]


def save_bundle(directory, bundle: ModelBundle) -> Path:
    tensors = {}
    tensors.update(_flatten("score", bundle.score_params))
    tensors.update(_flatten("enc", bundle.enc_params))
    tensors.update(_flatten("dec", bundle.dec_params))
    tensors["norm.0"] = bundle.latent_shift
    tensors["norm.1"] = bundle.latent_scale
    tensors["schedule.0"] = bundle.schedule.betas
    tensors["schedule.1"] = bundle.schedule.substeps.astype(np.float64)
    arch = {
        "score": _mlp_desc(bundle.score_arch),
        "enc": _mlp_desc(bundle.enc_arch),
        "dec": _mlp_desc(bundle.dec_arch),
        "norm": {
            "grid": bundle.grid,
            "latent_dim": bundle.latent_dim,
            "temb_dim": bundle.temb_dim,
            "sigma_min": bundle.sigma_min,
            "sigma_max": bundle.sigma_max,
            "enc_in_shift": bundle.enc_in_shift,
            "enc_in_scale": bundle.enc_in_scale,
        },
    }
    return write_manifest(directory, tensors, arch)


def load_bundle(directory) -> ModelBundle:
    tensors, arch = read_manifest(directory)
    for comp in ("score", "enc", "dec", "norm", "schedule"):
        if comp not in arch:
            raise ManifestError(f"checkpoint in {directory} lacks component {comp!r}")
    meta = arch["norm"]
    sched = DiffusionSchedule(tensors["schedule.0"], tensors["schedule.1"].astype(np.int64))
    bundle = ModelBundle(
        grid=meta["grid"],
        latent_dim=meta["latent_dim"],
        schedule=sched,
        score_arch=_mlp(arch["score"]),
        score_params=_collect(tensors, "score"),
        enc_arch=_mlp(arch["enc"]),
        enc_params=_collect(tensors, "enc"),
        dec_arch=_mlp(arch["dec"]),
        dec_params=_collect(tensors, "dec"),
        temb_dim=meta["temb_dim"],
        latent_shift=tensors["norm.0"],
        latent_scale=tensors["norm.1"],
        sigma_min=meta["sigma_min"],
        sigma_max=meta["sigma_max"],
        enc_in_shift=meta["enc_in_shift"],
        enc_in_scale=meta["enc_in_scale"],
    )
    return bundle


def save_surrogate(directory, handle: NeuralSurrogate) -> Path:
    return write_manifest(directory, _flatten("surrogate", handle.params), {"surrogate": asdict(handle.arch)})


def load_surrogate(directory) -> NeuralSurrogate:
    tensors, arch = read_manifest(directory)
    if "surrogate" not in arch:
        raise ManifestError(f"checkpoint in {directory} holds no surrogate")
    return NeuralSurrogate(SpectralArch(**arch["surrogate"]), tuple(_collect(tensors, "surrogate")))
