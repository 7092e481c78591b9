"""Binary dataset shards and the end-to-end dataset builder.

Shard layout (little-endian throughout):
    magic    4 bytes  b"MRTS"
    version  u32      currently 1
    n_scenes u32
    per scene:
        scene_id u32, seed u64, H u16, W u16,
        n_objects u8, n_views u8, n_qa u16
        objects * n_objects: shape u8, color u8, size u8, material u8, x f32, y f32
        cameras * n_views:   azimuth f32, elevation f32, radius f32, raw c 6*f32
        images  * n_views:   H*W*3 raw u8 RGB
        qa      * n_qa:      u32 byte-length + UTF-8 JSON record

View index 0 is always the canonical camera; indices >= 1 are the sampled
orbit views. Reading is the exact inverse; truncation or bad magic raises a
format error naming the byte offset.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .questions import QAItem, QuotaTracker, generate_questions, answer_oracle
from .render import render_view
from .scene import (
    CANONICAL_CAMERA,
    CameraPose,
    GenConfig,
    GenerationError,
    SceneGraph,
    SceneObject,
    sample_views,
    generate_scene,
)
from .seeding import child_rng, child_seed
from .vocab import SHAPES, COLORS, SIZES, MATERIALS

MAGIC = b"MRTS"
VERSION = 1


class ShardError(ValueError):
    """Malformed shard: bad magic/version or truncated payload."""


@dataclass
class SceneRecord:
    scene: SceneGraph
    cameras: list  # CameraPose per stored view; index 0 canonical
    images: np.ndarray  # (n_views, H, W, 3) uint8
    qa: list  # QAItem


def _pack_str_enum(value, table):
    return table.index(value)


def write_shard(scenes, views, images, qa, path):
    """Persist parallel per-scene lists; see module docstring for the layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(scenes)))
        for scene, cams, imgs, items in zip(scenes, views, images, qa):
            imgs = np.ascontiguousarray(imgs, dtype=np.uint8)
            n_views, H, W, _ = imgs.shape
            f.write(
                struct.pack(
                    "<IQHHBBH",
                    scene.scene_id,
                    scene.seed,
                    H,
                    W,
                    len(scene.objects),
                    n_views,
                    len(items),
                )
            )
            for o in scene.objects:
                f.write(
                    struct.pack(
                        "<BBBBff",
                        _pack_str_enum(o.shape, SHAPES),
                        _pack_str_enum(o.color, COLORS),
                        _pack_str_enum(o.size, SIZES),
                        _pack_str_enum(o.material, MATERIALS),
                        o.x,
                        o.y,
                    )
                )
            for cam in cams:
                raw = cam.raw6().astype(np.float32)
                f.write(struct.pack("<fff", cam.azimuth, cam.elevation, cam.radius))
                f.write(raw.tobytes())
            f.write(imgs.tobytes())
            for item in items:
                rec = {
                    "t": item.template_id,
                    "b": item.bindings,
                    "q": item.question,
                    "k": item.tokens,
                    "a": item.answer,
                    "s": item.scene_id,
                    "v": item.view_ids,
                }
                blob = json.dumps(rec, sort_keys=True, separators=(",", ":")).encode("utf-8")
                f.write(struct.pack("<I", len(blob)))
                f.write(blob)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise ShardError(f"truncated shard while reading {what} at byte offset {f.tell() - len(buf)}")
    return buf


def read_shard(path):
    """Inverse of write_shard: list of SceneRecord."""
    records = []
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise ShardError(f"{path}: bad magic bytes (not an MRTS shard)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise ShardError(f"{path}: unsupported shard version {version}")
        (n_scenes,) = struct.unpack("<I", _read_exact(f, 4, "scene count"))
        for _ in range(n_scenes):
            sid, seed, H, W, n_obj, n_views, n_qa = struct.unpack(
                "<IQHHBBH", _read_exact(f, 20, "scene header")
            )
            objects = []
            for _ in range(n_obj):
                sh, co, si, ma, x, y = struct.unpack("<BBBBff", _read_exact(f, 12, "object"))
                objects.append(
                    SceneObject(SHAPES[sh], COLORS[co], SIZES[si], MATERIALS[ma], x, y)
                )
            cameras = []
            for _ in range(n_views):
                az, el, rad = struct.unpack("<fff", _read_exact(f, 12, "camera"))
                _read_exact(f, 24, "camera raw form")  # raw6 is derivable; stored for tooling
                cameras.append(CameraPose(az, el, rad))
            imgs = np.frombuffer(
                _read_exact(f, n_views * H * W * 3, "images"), dtype=np.uint8
            ).reshape(n_views, H, W, 3)
            scene = SceneGraph(scene_id=sid, objects=objects, seed=seed)
            qa = []
            for _ in range(n_qa):
                (blen,) = struct.unpack("<I", _read_exact(f, 4, "qa length"))
                rec = json.loads(_read_exact(f, blen, "qa record").decode("utf-8"))
                qa.append(
                    QAItem(
                        template_id=rec["t"],
                        bindings=rec["b"],
                        question=rec["q"],
                        tokens=rec["k"],
                        answer=rec["a"],
                        scene_id=rec["s"],
                        view_ids=rec["v"],
                    )
                )
            records.append(SceneRecord(scene=scene, cameras=cameras, images=imgs.copy(), qa=qa))
        trailing = f.read(1)
        if trailing:
            raise ShardError(f"{path}: trailing bytes after last scene at offset {f.tell() - 1}")
    return records


@dataclass
class DatasetConfig:
    seed: int = 0
    mode: str = "v1"
    image_size: int = 64
    n_views: int = 8  # sampled orbit views; the canonical view is stored besides
    scenes_train: int = 2000
    scenes_val: int = 100
    scenes_test: int = 200
    questions_per_scene: int = 6
    min_objects: int = 3
    max_objects: int = 6
    templates: tuple = (1, 2, 3, 4, 5, 6, 7, 8)

    def validate(self):
        if self.mode not in ("v1", "v2"):
            raise ValueError(f"mode must be v1 or v2, got {self.mode!r}")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.n_views < 2:
            raise ValueError("need at least two sampled views per scene")
        return self

    def to_dict(self):
        d = asdict(self)
        d["templates"] = list(self.templates)
        return d

    @classmethod
    def from_file(cls, path):
        """Parse a key=value genconfig file ('#' starts a comment)."""
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        kwargs = {}
        for f_name, f_type in (
            ("seed", int),
            ("mode", str),
            ("image_size", int),
            ("n_views", int),
            ("scenes_train", int),
            ("scenes_val", int),
            ("scenes_test", int),
            ("questions_per_scene", int),
            ("min_objects", int),
            ("max_objects", int),
        ):
            if f_name in values:
                kwargs[f_name] = f_type(values.pop(f_name))
        if "templates" in values:
            kwargs["templates"] = tuple(int(t) for t in values.pop("templates").split(","))
        if values:
            raise ValueError(f"{path}: unknown genconfig keys {sorted(values)}")
        return cls(**kwargs).validate()


def _build_scene(cfg, scene_id, mode):
    """One scene with all views rendered and questions attached."""
    sizes = ("large",) if mode == "v1" else ("small", "large")
    gen_cfg = GenConfig(min_objects=cfg.min_objects, max_objects=cfg.max_objects, sizes=sizes)
    scene = None
    for retry in range(20):
        rng = child_rng(cfg.seed, f"scene/{scene_id}/try{retry}")
        try:
            scene = generate_scene(rng, gen_cfg, scene_id=scene_id)
            break
        except GenerationError:
            continue
    if scene is None:
        raise GenerationError(f"scene {scene_id}: placement failed in 20 resamples")
    scene.seed = child_seed(cfg.seed, f"scene/{scene_id}") % (1 << 63)

    view_rng = child_rng(cfg.seed, f"views/{scene_id}")
    cams = [CANONICAL_CAMERA] + sample_views(scene, cfg.n_views, cfg.mode, view_rng)
    dims = (cfg.image_size, cfg.image_size)
    images = np.stack([render_view(scene, cam, dims) for cam in cams])
    return scene, cams, images


def build_dataset(cfg, out_dir, log=None):
    """Generate train/val/test shards plus a JSON stats report.

    Scene ids are globally disjoint across splits; question balancing runs
    per split through a shared quota tracker.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = (
        ("train", cfg.scenes_train, 0),
        ("val", cfg.scenes_val, cfg.scenes_train),
        ("test", cfg.scenes_test, cfg.scenes_train + cfg.scenes_val),
    )
    stats = {
        "config": cfg.to_dict(),
        "splits": {},
        "answers": {},
        "templates": {},
        "objects": {"shapes": {}, "colors": {}, "sizes": {}, "materials": {}},
    }
    t_start = time.time()
    for split, n_scenes, id_base in splits:
        tracker = QuotaTracker()
        scenes, views, images, qa = [], [], [], []
        n_questions = 0
        for k in range(n_scenes):
            scene_id = id_base + k
            scene, cams, imgs = _build_scene(cfg, scene_id, cfg.mode)
            q_rng = child_rng(cfg.seed, f"questions/{scene_id}")
            items = generate_questions(
                scene,
                q_rng,
                count=cfg.questions_per_scene,
                tracker=tracker,
                templates=cfg.templates,
            )
            for item in items:
                item.view_ids = list(range(len(cams)))
            scenes.append(scene)
            views.append(cams)
            images.append(imgs)
            qa.append(items)
            n_questions += len(items)
            for o in scene.objects:
                for key, val in (
                    ("shapes", o.shape),
                    ("colors", o.color),
                    ("sizes", o.size),
                    ("materials", o.material),
                ):
                    stats["objects"][key][val] = stats["objects"][key].get(val, 0) + 1
            for item in items:
                stats["answers"][item.answer] = stats["answers"].get(item.answer, 0) + 1
                t_key = str(item.template_id)
                stats["templates"][t_key] = stats["templates"].get(t_key, 0) + 1
        write_shard(scenes, views, images, qa, out_dir / f"{split}.mrts")
        stats["splits"][split] = {"scenes": n_scenes, "questions": n_questions}
        if log:
            log(f"[gen] {split}: {n_scenes} scenes, {n_questions} questions")
    stats["wall_seconds"] = round(time.time() - t_start, 2)
    with open(out_dir / "stats.json", "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    return stats


def audit_shard(path, n_scenes=None):
    """Recompute every stored answer through the oracle; returns scenes checked."""
    records = read_shard(path)
    if n_scenes is not None:
        records = records[:n_scenes]
    for rec in records:
        for item in rec.qa:
            expect = answer_oracle(rec.scene, item.bindings)
            if expect != item.answer:
                raise ShardError(
                    f"{path}: scene {rec.scene.scene_id} stored answer {item.answer!r} "
                    f"!= recomputed {expect!r}"
                )
    return len(records)
