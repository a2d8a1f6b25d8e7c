"""Difference-map construction from longitudinal T2w pairs.

Bias correction, registration and skull stripping are delegated to external
tools through command templates; any of them can be replaced by an identity
bypass. Z-scoring, differencing and resampling are done here.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, StageError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_INPUT_GRID = (96, 96, 64)
STAGE_ORDER = ("bias_correction", "registration", "skull_strip")


@dataclass(frozen=True, eq=False)
class Volume3D:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValidationError(f"expected a 3D array, got shape {vox.shape}")
        if min(vox.shape) < 1:
            raise ValidationError(f"empty volume shape {vox.shape}")
        if vox.dtype.kind not in "fiub":
            raise ValidationError(f"unsupported voxel dtype {vox.dtype}")
        if vox.dtype.kind != "b" and not np.all(np.isfinite(vox)):
            raise ValidationError("volume contains non-finite intensities")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValidationError(f"spacing must be three positive numbers, got {self.spacing}")
        orient = np.asarray(self.orientation, dtype=float)
        if orient.shape != (3, 3):
            raise ValidationError("orientation must be a 3x3 direction matrix")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "orientation", orient)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray, spacing=None) -> "Volume3D":
        return Volume3D(
            voxels,
            self.spacing if spacing is None else spacing,
            self.orientation,
            self.origin,
        )

    def same_grid(self, other: "Volume3D", atol: float = 1e-6) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.orientation, other.orientation, atol=atol)
        )

    def affine(self) -> np.ndarray:
        aff = np.eye(4)
        aff[:3, :3] = self.orientation * np.asarray(self.spacing)[None, :]
        aff[:3, 3] = self.origin
        return aff


# -- IO ---------------------------------------------------------------------


def save_volume(volume: Volume3D, path: str | os.PathLike) -> Path:
    """Write NIfTI (.nii / .nii.gz) or raw float32 (.raw + .json sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = path.name
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        import nibabel as nib

        img = nib.Nifti1Image(np.asarray(volume.voxels, dtype=np.float32), volume.affine())
        img.header.set_zooms(volume.spacing)
        nib.save(img, str(path))
    elif name.endswith(".raw"):
        np.asarray(volume.voxels, dtype="<f4").tofile(path)
        sidecar = {
            "shape": list(volume.shape),
            "spacing": list(volume.spacing),
            "orientation": np.asarray(volume.orientation).tolist(),
            "origin": list(volume.origin),
            "dtype": "float32-le",
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")
    else:
        raise ValidationError(f"unsupported volume container: {path}")
    return path


def load_volume(path: str | os.PathLike) -> Volume3D:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    name = path.name
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        import nibabel as nib

        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        aff = img.affine
        spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
        orient = aff[:3, :3] / np.asarray(spacing)[None, :]
        return Volume3D(data, spacing, orient, tuple(aff[:3, 3]))
    if name.endswith(".raw"):
        sidecar = path.with_suffix(".json")
        if not sidecar.exists():
            raise FileNotFoundError(f"raw sidecar not found: {sidecar}")
        meta = json.loads(sidecar.read_text())
        data = np.fromfile(path, dtype="<f4")
        shape = tuple(meta["shape"])
        if data.size != int(np.prod(shape)):
            raise ValidationError(f"{path}: {data.size} values do not fill shape {shape}")
        return Volume3D(
            data.reshape(shape),
            tuple(meta["spacing"]),
            np.asarray(meta.get("orientation", np.eye(3))),
            tuple(meta.get("origin", (0, 0, 0))),
        )
    raise ValidationError(f"unsupported volume container: {path}")


# -- external stages --------------------------------------------------------


class StageKind(str, enum.Enum):
    BIAS_CORRECTION = "bias_correction"
    REGISTRATION = "registration"
    SKULL_STRIP = "skull_strip"
    IDENTITY_BYPASS = "identity_bypass"


@dataclass(frozen=True)
class StageDescriptor:
    """One preprocessing stage.

    ``executable_hint`` is a command template. Single-volume stages get
    ``{input}`` and ``{output}``; registration gets ``{moving}``, ``{fixed}``
    and ``{output}``. An identity bypass names the stage it stands in for
    via ``replaces``.
    """

    kind: StageKind
    executable_hint: str | None = None
    provenance_note: str = ""
    replaces: str | None = None
    timeout: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StageKind(self.kind))
        if self.kind is StageKind.IDENTITY_BYPASS:
            if self.executable_hint:
                raise ValidationError("identity_bypass takes no executable")
            if self.replaces is not None and self.replaces not in STAGE_ORDER:
                raise ValidationError(f"bypass replaces unknown stage {self.replaces!r}")
        else:
            if not self.executable_hint:
                raise ValidationError(f"{self.kind.value} stage needs a command template")

    @property
    def slot(self) -> str | None:
        if self.kind is StageKind.IDENTITY_BYPASS:
            return self.replaces
        return self.kind.value

    @classmethod
    def bypass(cls, stage: str, note: str = "") -> "StageDescriptor":
        return cls(StageKind.IDENTITY_BYPASS, replaces=stage, provenance_note=note)


def bypass_pipeline() -> list[StageDescriptor]:
    return [StageDescriptor.bypass(s) for s in STAGE_ORDER]


def _check_stage_order(stages: Sequence[StageDescriptor]) -> None:
    slots = [s.slot for s in stages if s.slot is not None]
    positions = [STAGE_ORDER.index(s) for s in slots]
    if positions != sorted(set(positions)) or len(positions) != len(set(positions)):
        raise ValidationError(f"stage order {slots} is not a subsequence of {list(STAGE_ORDER)}")


def _run_command(kind: str, template: str, mapping: dict[str, str], timeout) -> str:
    cmd = template.format(**{k: shlex.quote(v) for k, v in mapping.items()})
    try:
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, timeout=timeout)
    except subprocess.TimeoutExpired as exc:
        raise StageError(kind, f"timed out after {timeout}s", str(exc)) from None
    if proc.returncode != 0:
        raise StageError(kind, f"exit status {proc.returncode}", (proc.stderr or proc.stdout)[-4000:])
    if not Path(mapping["output"]).exists():
        raise StageError(kind, "command produced no output file", proc.stderr[-4000:])
    return cmd


def run_stage_pipeline(
    previous: Volume3D,
    current: Volume3D,
    stages: Sequence[StageDescriptor],
    workdir: str | os.PathLike | None = None,
):
    """Pass a longitudinal pair through the configured stages.

    Returns ``(previous_processed, current_processed, provenance_log)``; the
    log holds one dict per stage application, in order.
    """
    _check_stage_order(stages)
    log_entries = []
    prev, cur = previous, current
    with tempfile.TemporaryDirectory(prefix="gliotl-stage-", dir=workdir) as tmp:
        tmp = Path(tmp)
        for i, stage in enumerate(stages):
            slot = stage.slot or "unspecified"
            if stage.kind is StageKind.IDENTITY_BYPASS:
                log_entries.append(
                    {"stage": slot, "action": "bypass", "command": None, "note": stage.provenance_note}
                )
            elif stage.kind is StageKind.REGISTRATION:
                moving = save_volume(prev, tmp / f"{i}_moving.nii.gz")
                fixed = save_volume(cur, tmp / f"{i}_fixed.nii.gz")
                out = tmp / f"{i}_warped.nii.gz"
                cmd = _run_command(
                    slot,
                    stage.executable_hint,
                    {"moving": str(moving), "fixed": str(fixed), "output": str(out)},
                    stage.timeout,
                )
                prev = load_volume(out)
                log_entries.append(
                    {"stage": slot, "action": "external", "command": cmd, "note": stage.provenance_note}
                )
            else:
                outs = []
                cmds = []
                for tag, vol in (("previous", prev), ("current", cur)):
                    src = save_volume(vol, tmp / f"{i}_{tag}_in.nii.gz")
                    out = tmp / f"{i}_{tag}_out.nii.gz"
                    cmds.append(
                        _run_command(
                            slot, stage.executable_hint, {"input": str(src), "output": str(out)}, stage.timeout
                        )
                    )
                    outs.append(load_volume(out))
                prev, cur = outs
                log_entries.append(
                    {"stage": slot, "action": "external", "command": cmds, "note": stage.provenance_note}
                )
            if slot == "registration" and not prev.same_grid(cur):
                raise ValidationError(
                    f"after registration the grids differ: previous {prev.shape} vs current {cur.shape}"
                )
    if not prev.same_grid(cur):
        raise ValidationError(f"pair grids differ after pipeline: {prev.shape} vs {cur.shape}")
    return prev, cur, log_entries


# -- intensity operations ---------------------------------------------------


def zscore_normalize(volume: Volume3D, mask: Volume3D | np.ndarray | None = None) -> Volume3D:
    """Z-score with the sample (n-1) standard deviation.

    Statistics are taken over ``mask`` (or the whole volume); voxels outside
    the mask are set to 0.
    """
    data = np.asarray(volume.voxels, dtype=np.float64)
    if mask is None:
        sel = np.ones(data.shape, dtype=bool)
    else:
        sel = np.asarray(mask.voxels if isinstance(mask, Volume3D) else mask).astype(bool)
        if sel.shape != data.shape:
            raise ValidationError(f"mask shape {sel.shape} differs from volume {data.shape}")
    values = data[sel]
    if values.size < 2:
        raise ValidationError("z-scoring needs at least two voxels in the mask")
    mean = values.mean()
    std = values.std(ddof=1)
    if not std > 0:
        raise DegenerateInputError("zero variance: a constant volume cannot be z-scored")
    out = np.zeros_like(data)
    out[sel] = (values - mean) / std
    return volume.with_voxels(out)


def absolute_difference(previous_warped: Volume3D, current: Volume3D) -> Volume3D:
    if not previous_warped.same_grid(current):
        raise ValidationError(
            f"grid mismatch: previous {previous_warped.shape}/{previous_warped.spacing} "
            f"vs current {current.shape}/{current.spacing}"
        )
    diff = np.abs(
        np.asarray(previous_warped.voxels, dtype=np.float64) - np.asarray(current.voxels, dtype=np.float64)
    )
    return current.with_voxels(diff)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: first and last samples coincide
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resample_to_grid(volume: Volume3D, target_shape: Sequence[int]) -> Volume3D:
    """Trilinear, corner-aligned resampling onto ``target_shape``."""
    target = tuple(int(t) for t in target_shape)
    if len(target) != 3 or min(target) < 1:
        raise ValidationError(f"bad target shape {target_shape}")
    data = np.asarray(volume.voxels, dtype=np.float64)
    if target == data.shape:
        return volume.with_voxels(data.copy())
    axes = [_axis_coords(n, m) for n, m in zip(data.shape, target)]
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(data, coords, order=1, mode="nearest", prefilter=False)
    # linear weights can overshoot by rounding; keep the range contract exact
    out = np.clip(out, data.min(), data.max())
    spacing = tuple(
        s * (n - 1) / (m - 1) if m > 1 else s * n for s, n, m in zip(volume.spacing, data.shape, target)
    )
    return volume.with_voxels(out, spacing=spacing)


def make_difference_map(
    previous: Volume3D,
    current: Volume3D,
    stages: Sequence[StageDescriptor] | None = None,
    target_shape: Sequence[int] | None = None,
    use_brain_mask: bool = False,
):
    """Full chain: stages, z-score both, absolute difference, optional resample.

    With ``use_brain_mask`` the z-score statistics are restricted to
    non-zero voxels of each (skull-stripped) volume.
    """
    stages = bypass_pipeline() if stages is None else stages
    prev, cur, prov = run_stage_pipeline(previous, current, stages)
    prev_n = zscore_normalize(prev, prev.voxels != 0 if use_brain_mask else None)
    cur_n = zscore_normalize(cur, cur.voxels != 0 if use_brain_mask else None)
    diff = absolute_difference(prev_n, cur_n)
    if target_shape is not None:
        diff = resample_to_grid(diff, target_shape)
    return diff, prov
