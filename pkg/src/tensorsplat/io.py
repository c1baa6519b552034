"""Bit-exact file formats: checkpoints, tensors, PPM images, configs, poses.

Checkpoints and tensor files are little-endian binary with a trailing CRC32
so round-trips are byte-identical and corruption is always detected. Images
are binary PPM (P6, maxval 255, values = round(clamp(v, 0, 1) * 255)); masks
are stored as gray P6. Run configuration is line-oriented ``key = value``
text under ``[section]`` headers with unknown keys rejected. Pose files are
text, one whitespace-separated angle list per frame.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cp import CPModel
from .dataset import DatasetSpec, Frame, IdentityData, SyntheticDataset
from .deform import Bone2D, Pose, Skeleton2D
from .model import LAYOUTS, FactorizedAvatarStore, GaussianSet, ParamLayout
from .render import Viewport
from .train import LossWeights, OptConfig, TrainConfig, TrainHistory

CHECKPOINT_MAGIC = b"MIGS"
TENSOR_MAGIC = b"TNS3"
FORMAT_VERSION = 1

_LAYOUT_IDS = {None: 0, "2d": 1, "3d": 2}
_LAYOUT_NAMES = {v: k for k, v in _LAYOUT_IDS.items()}


class FileFormatError(ValueError):
    """Malformed or corrupted file; message is a single-line diagnostic."""


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    model: CPModel
    layout_name: str | None
    personalization: np.ndarray | None

    def to_store(self) -> FactorizedAvatarStore:
        if self.layout_name is None:
            raise FileFormatError("checkpoint has no parameter layout; cannot build a store")
        layout = LAYOUTS[self.layout_name]()
        return FactorizedAvatarStore(self.model, layout, self.personalization)


def _f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(
    path,
    model: CPModel,
    layout: ParamLayout | None = None,
    personalization: np.ndarray | None = None,
) -> None:
    """Write a versioned binary checkpoint with trailing CRC32."""
    n_i, n_g, m_dims = model.dims
    if layout is not None and layout.total != m_dims:
        raise ValueError(f"layout expects {layout.total} parameter dims, model has {m_dims}")
    if personalization is not None:
        if layout is None:
            raise ValueError("personalization requires a layout")
        want = (n_i, n_g, layout.residual_dims)
        if personalization.shape != want:
            raise ValueError(f"personalization shape {personalization.shape}, expected {want}")
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IIIIIIB",
        FORMAT_VERSION,
        m_dims,
        n_i,
        n_g,
        model.rank,
        _LAYOUT_IDS[None if layout is None else layout.name],
        0 if personalization is None else 1,
    )
    body = header + _f64_bytes(model.u_params) + _f64_bytes(model.u_identity) + _f64_bytes(model.u_gaussian)
    if personalization is not None:
        body += _f64_bytes(personalization)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(body)


def save_store(path, store: FactorizedAvatarStore) -> None:
    save_checkpoint(path, store.model, store.layout, store.personalization)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 25 + 4:
        raise FileFormatError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise FileFormatError(f"{path}: CRC mismatch, file is corrupted")
    version, m_dims, n_i, n_g, rank, layout_id, has_res = struct.unpack("<IIIIIIB", raw[4:29])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    if layout_id not in _LAYOUT_NAMES:
        raise FileFormatError(f"{path}: unknown layout id {layout_id}")
    layout_name = _LAYOUT_NAMES[layout_id]
    counts = [m_dims * rank, n_i * rank, n_g * rank]
    res_count = 0
    if has_res:
        if layout_name is None:
            raise FileFormatError(f"{path}: personalization present but no layout")
        res_count = n_i * n_g * LAYOUTS[layout_name]().residual_dims
    expected = 29 + 8 * (sum(counts) + res_count) + 4
    if len(raw) != expected:
        raise FileFormatError(f"{path}: size {len(raw)} does not match dims (expected {expected})")
    offset = 29
    arrays = []
    for count in counts:
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy())
        offset += 8 * count
    u_params = arrays[0].reshape(m_dims, rank)
    u_identity = arrays[1].reshape(n_i, rank)
    u_gaussian = arrays[2].reshape(n_g, rank)
    personalization = None
    if has_res:
        personalization = (
            np.frombuffer(raw, dtype="<f8", count=res_count, offset=offset)
            .copy()
            .reshape(n_i, n_g, -1)
        )
    try:
        model = CPModel(rank, u_params, u_identity, u_gaussian)
    except ValueError as exc:
        raise FileFormatError(f"{path}: invalid factors: {exc}") from exc
    return Checkpoint(model, layout_name, personalization)


# ------------------------------------------------------------- tensor files


def save_tensor3(path, tensor: np.ndarray) -> None:
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={t.ndim}")
    body = TENSOR_MAGIC + struct.pack("<IIII", FORMAT_VERSION, *t.shape) + _f64_bytes(t)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(body)


def load_tensor3(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != TENSOR_MAGIC:
        raise FileFormatError(f"{path}: not a tensor file")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise FileFormatError(f"{path}: CRC mismatch, file is corrupted")
    version, n1, n2, n3 = struct.unpack("<IIII", raw[4:20])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported format version {version}")
    count = n1 * n2 * n3
    if len(raw) != 20 + 8 * count + 4:
        raise FileFormatError(f"{path}: size does not match dims ({n1}, {n2}, {n3})")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=20).copy().reshape(n1, n2, n3)


# -------------------------------------------------------------------- PPM


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, maxval 255; values are round(clamp(channel, 0, 1) * 255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:  # gray (e.g. alpha masks) stored as gray RGB
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) or (H, W) image, got {img.shape}")
    h, w = img.shape[:2]
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into float64 RGB in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise FileFormatError(f"{path}: not a binary PPM (P6)")
    # header: magic, width, height, maxval as whitespace-separated tokens
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FileFormatError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad PPM header fields {fields}") from exc
    if maxval != 255:
        raise FileFormatError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    data = raw[pos : pos + need]
    if len(data) != need:
        raise FileFormatError(f"{path}: expected {need} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_mask_ppm(path) -> np.ndarray:
    """Read a gray P6 mask back to (H, W) floats."""
    return read_ppm(path)[:, :, 0]


# ------------------------------------------------------------------- poses


def save_poses(path, poses: list[Pose]) -> None:
    lines = [" ".join(repr(a) for a in pose.angles) for pose in poses]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_poses(path, n_bones: int) -> list[Pose]:
    poses = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            angles = np.array([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise FileFormatError(f"{path}:{ln}: bad pose line: {exc}") from exc
        if len(angles) != n_bones:
            raise FileFormatError(
                f"{path}:{ln}: pose has {len(angles)} angles, skeleton has {n_bones} bones"
            )
        poses.append(Pose(angles))
    if not poses:
        raise FileFormatError(f"{path}: no poses found")
    return poses


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "full"
    mode_identity: int | None = None
    rank: int = 16
    identities: int = 4
    gaussians: int = 64
    bones: int = 3
    image_size: int = 32
    train_poses: int = 24
    heldout_poses: int = 8
    iterations: int = 2000
    warmup: int = 0
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_appearance: float = 2.5e-3
    lr_opacity: float = 5e-2
    loss_l1: float = 1.0
    loss_mask: float = 0.1
    loss_isopos: float = 1.0
    loss_isocov: float = 100.0

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            n_identities=self.identities,
            n_gaussians=self.gaussians,
            n_bones=self.bones,
            image_size=self.image_size,
            train_poses=self.train_poses,
            heldout_poses=self.heldout_poses,
        )

    def opt_config(self) -> OptConfig:
        return OptConfig(
            lr_position=self.lr_position,
            lr_position_final=self.lr_position_final,
            lr_scale=self.lr_scale,
            lr_rotation=self.lr_rotation,
            lr_appearance=self.lr_appearance,
            lr_opacity=self.lr_opacity,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_l1, self.loss_mask, self.loss_isopos, self.loss_isocov)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            seed=self.seed,
            warmup=self.warmup,
            mode=self.mode,
            mode_identity=self.mode_identity,
            weights=self.loss_weights(),
            opt=self.opt_config(),
        )


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise ValueError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(raw: str) -> int:
    value = int(raw)
    if value < 0:
        raise ValueError(f"must be >= 0, got {value}")
    return value


def _non_negative_float(raw: str) -> float:
    value = float(raw)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"must be a finite non-negative number, got {raw}")
    return value


def _mode(raw: str) -> str:
    if raw not in ("full", "per_identity", "novel_identity", "personalization"):
        raise ValueError(f"unknown mode {raw!r}")
    return raw


# section -> key -> (RunConfig field, parser)
_CONFIG_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("seed", _non_negative_int),
        "mode": ("mode", _mode),
        "mode_identity": ("mode_identity", _non_negative_int),
    },
    "model": {
        "rank": ("rank", _positive_int),
    },
    "dataset": {
        "identities": ("identities", _positive_int),
        "gaussians": ("gaussians", _positive_int),
        "bones": ("bones", _positive_int),
        "image_size": ("image_size", _positive_int),
        "train_poses": ("train_poses", _positive_int),
        "heldout_poses": ("heldout_poses", _non_negative_int),
    },
    "train": {
        "iterations": ("iterations", _non_negative_int),
        "warmup": ("warmup", _non_negative_int),
    },
    "optimizer": {
        "lr_position": ("lr_position", _non_negative_float),
        "lr_position_final": ("lr_position_final", _non_negative_float),
        "lr_scale": ("lr_scale", _non_negative_float),
        "lr_rotation": ("lr_rotation", _non_negative_float),
        "lr_appearance": ("lr_appearance", _non_negative_float),
        "lr_opacity": ("lr_opacity", _non_negative_float),
    },
    "loss": {
        "l1": ("loss_l1", _non_negative_float),
        "mask": ("loss_mask", _non_negative_float),
        "isopos": ("loss_isopos", _non_negative_float),
        "isocov": ("loss_isocov", _non_negative_float),
    },
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate ``key = value`` config text; unknown keys rejected."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise FileFormatError(f"{source}: {exc.message if hasattr(exc, 'message') else exc}") from exc
    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise FileFormatError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _CONFIG_SCHEMA[section]:
                raise FileFormatError(f"{source}: unknown key {key!r} in section [{section}]")
            field_name, convert = _CONFIG_SCHEMA[section][key]
            try:
                values[field_name] = convert(raw)
            except ValueError as exc:
                raise FileFormatError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from exc
    config = RunConfig(**values)
    if config.mode != "full" and config.mode_identity is None:
        raise FileFormatError(f"{source}: mode {config.mode!r} requires mode_identity")
    # surface dataset-spec range errors (e.g. pose angle ordering) here
    try:
        config.dataset_spec()
    except ValueError as exc:
        raise FileFormatError(f"{source}: {exc}") from exc
    return config


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), source=str(path))


# -------------------------------------------------------- dataset directory


def _skeleton_to_json(sk: Skeleton2D) -> list[dict]:
    return [
        {
            "parent": bone.parent,
            "origin": [bone.origin[0], bone.origin[1]],
            "angle": bone.angle,
            "length": bone.length,
        }
        for bone in sk.bones
    ]


def _skeleton_from_json(data: list[dict]) -> Skeleton2D:
    return Skeleton2D(
        tuple(
            Bone2D(
                parent=bone["parent"],
                origin=(bone["origin"][0], bone["origin"][1]),
                angle=bone["angle"],
                length=bone["length"],
            )
            for bone in data
        )
    )


def _gaussian_set_to_json(gs: GaussianSet) -> dict:
    return {
        "position": gs.position.tolist(),
        "scale": gs.scale.tolist(),
        "angle": gs.angle.tolist(),
        "color": gs.color.tolist(),
        "opacity": gs.opacity.tolist(),
    }


def _gaussian_set_from_json(data: dict) -> GaussianSet:
    return GaussianSet(
        position=np.array(data["position"]),
        scale=np.array(data["scale"]),
        angle=np.array(data["angle"]),
        color=np.array(data["color"]),
        opacity=np.array(data["opacity"]),
    )


def save_dataset(dataset: SyntheticDataset, out_dir, init_prior: GaussianSet) -> None:
    """Write manifest + per-frame PPM images/masks + pose files.

    ``init_prior`` is the neutral seed Gaussian set used to initialize
    training on this dataset; it ships with the data the way a canonical
    body prior would.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": FORMAT_VERSION,
        "spec": dataclasses.asdict(dataset.spec),
        "viewport": {
            "width": dataset.viewport.width,
            "height": dataset.viewport.height,
            "scale": dataset.viewport.scale,
            "origin": list(dataset.viewport.origin),
        },
        "init_prior": _gaussian_set_to_json(init_prior),
        "identities": [],
    }
    for i, ident in enumerate(dataset.identities):
        ident_dir = out / f"id{i:02d}"
        ident_dir.mkdir(exist_ok=True)
        entry = {"skeleton": _skeleton_to_json(ident.skeleton), "frames": {}}
        for split, frames in (("train", ident.train_frames), ("held_out", ident.heldout_frames)):
            entries = []
            for k, frame in enumerate(frames):
                image_name = f"id{i:02d}/{split}_{k:03d}.ppm"
                mask_name = f"id{i:02d}/{split}_{k:03d}_mask.ppm"
                write_ppm(out / image_name, frame.image)
                write_ppm(out / mask_name, frame.mask)
                entries.append(
                    {"pose": frame.pose.angles.tolist(), "image": image_name, "mask": mask_name}
                )
            entry["frames"][split] = entries
        manifest["identities"].append(entry)
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )


def load_dataset(in_dir) -> tuple[SyntheticDataset, GaussianSet]:
    """Load a dataset directory; returns (dataset, init prior Gaussian set).

    Images come back quantized through the 8-bit PPM files, which keeps CLI
    training deterministic regardless of who wrote the directory.
    """
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileFormatError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{manifest_path}: invalid JSON: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FileFormatError(f"{manifest_path}: unsupported format version")
    try:
        spec = DatasetSpec(**manifest["spec"])
        vp_data = manifest["viewport"]
        viewport = Viewport(
            vp_data["width"], vp_data["height"], vp_data["scale"], tuple(vp_data["origin"])
        )
        init_prior = _gaussian_set_from_json(manifest["init_prior"])
        identities = []
        for entry in manifest["identities"]:
            sk = _skeleton_from_json(entry["skeleton"])
            frames = {}
            for split in ("train", "held_out"):
                frames[split] = [
                    Frame(
                        Pose(np.array(fr["pose"])),
                        read_ppm(root / fr["image"]),
                        read_mask_ppm(root / fr["mask"]),
                    )
                    for fr in entry["frames"][split]
                ]
            identities.append(IdentityData(sk, None, frames["train"], frames["held_out"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FileFormatError):
            raise
        raise FileFormatError(f"{manifest_path}: malformed manifest: {exc}") from exc
    return SyntheticDataset(spec, viewport, identities), init_prior


# -------------------------------------------------------------- metrics CSV


def write_metrics_csv(path, history: TrainHistory) -> None:
    """Per-iteration loss terms and current-frame PSNR, one row each."""
    lines = ["iter,identity,loss_total,loss_l1,loss_mask,loss_isopos,loss_isocov,psnr"]
    for k in range(len(history.iteration)):
        lines.append(
            f"{history.iteration[k]},{history.identity[k]}"
            f",{history.loss_total[k]:.10g},{history.loss_l1[k]:.10g}"
            f",{history.loss_mask[k]:.10g},{history.loss_isopos[k]:.10g}"
            f",{history.loss_isocov[k]:.10g},{history.psnr[k]:.10g}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_eval_csv(path, metrics, split: str) -> None:
    lines = ["identity,split,frame,psnr"]
    for fm in metrics.frames:
        lines.append(f"{fm.identity},{split},{fm.frame},{fm.psnr:.10g}")
    lines.append(f"all,{split},mean,{metrics.mean_psnr:.10g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
