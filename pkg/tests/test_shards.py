"""Shard format, dataset builder, and genconfig parsing."""

import hashlib

import numpy as np
import pytest

from mrtvqa.shards import (
    DatasetConfig,
    ShardError,
    audit_shard,
    build_dataset,
    read_shard,
    write_shard,
)


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = DatasetConfig(seed=21, scenes_train=12, scenes_val=4, scenes_test=5, n_views=3)
    stats = build_dataset(cfg, out)
    return out, cfg, stats


class TestShardFormat:
    def test_round_trip_field_identical(self, built):
        out, _, _ = built
        records = read_shard(out / "train.mrts")
        tmp = out / "rewrite.mrts"
        write_shard(
            [r.scene for r in records],
            [r.cameras for r in records],
            [r.images for r in records],
            [r.qa for r in records],
            tmp,
        )
        again = read_shard(tmp)
        for a, b in zip(records, again):
            assert a.scene.scene_id == b.scene.scene_id
            assert a.scene.objects == b.scene.objects
            np.testing.assert_array_equal(a.images, b.images)
            assert [q.__dict__ for q in a.qa] == [q.__dict__ for q in b.qa]
            for ca, cb in zip(a.cameras, b.cameras):
                assert (ca.azimuth, ca.elevation, ca.radius) == (
                    cb.azimuth,
                    cb.elevation,
                    cb.radius,
                )

    def test_truncation_rejected_with_offset(self, built):
        out, _, _ = built
        blob = (out / "train.mrts").read_bytes()
        bad = out / "trunc.mrts"
        bad.write_bytes(blob[: len(blob) // 3])
        with pytest.raises(ShardError, match="byte offset"):
            read_shard(bad)

    def test_bad_magic_rejected(self, built):
        out, _, _ = built
        bad = out / "magic.mrts"
        bad.write_bytes(b"XXXX" + (out / "train.mrts").read_bytes()[4:])
        with pytest.raises(ShardError, match="magic"):
            read_shard(bad)

    def test_audit_matches_oracle(self, built):
        out, _, _ = built
        assert audit_shard(out / "train.mrts") == 12


class TestBuildDataset:
    def test_split_scene_ids_disjoint(self, built):
        out, _, _ = built
        ids = {}
        for split in ("train", "val", "test"):
            ids[split] = {r.scene.scene_id for r in read_shard(out / f"{split}.mrts")}
        assert not ids["train"] & ids["val"]
        assert not ids["train"] & ids["test"]
        assert not ids["val"] & ids["test"]

    def test_byte_identical_with_same_seed(self, built, tmp_path):
        out, cfg, _ = built
        build_dataset(cfg, tmp_path)
        for split in ("train", "val", "test"):
            h1 = hashlib.sha256((out / f"{split}.mrts").read_bytes()).hexdigest()
            h2 = hashlib.sha256((tmp_path / f"{split}.mrts").read_bytes()).hexdigest()
            assert h1 == h2

    def test_question_count_near_six_per_scene(self, built):
        _, _, stats = built
        total_scenes = sum(s["scenes"] for s in stats["splits"].values())
        total_q = sum(s["questions"] for s in stats["splits"].values())
        assert abs(total_q - 6 * total_scenes) <= 0.1 * 6 * total_scenes

    def test_default_validation_fraction_near_five_percent(self):
        cfg = DatasetConfig()
        frac = cfg.scenes_val / (cfg.scenes_train + cfg.scenes_val)
        assert abs(frac - 0.05) < 0.005
        assert (cfg.scenes_train, cfg.scenes_val, cfg.scenes_test) == (2000, 100, 200)
        assert cfg.n_views == 8 and cfg.image_size == 64

    def test_canonical_view_stored_first(self, built):
        out, _, _ = built
        rec = read_shard(out / "val.mrts")[0]
        assert rec.cameras[0].azimuth == 0.0 and rec.cameras[0].elevation == 30.0
        assert len(rec.cameras) == 4  # canonical + 3 sampled
        assert rec.images.shape[0] == 4

    def test_stats_report_contents(self, built):
        _, _, stats = built
        assert set(stats["objects"]) == {"shapes", "colors", "sizes", "materials"}
        assert stats["answers"] and stats["templates"]


class TestGenConfig:
    def test_parse_key_value_file(self, tmp_path):
        p = tmp_path / "gen.cfg"
        p.write_text(
            "# comment\nseed = 9\nmode=v2\nn_views=4\nscenes_train = 10\n"
            "scenes_val=3\nscenes_test=2\nimage_size=64\ntemplates=1,3,5\n"
        )
        cfg = DatasetConfig.from_file(p)
        assert cfg.seed == 9 and cfg.mode == "v2" and cfg.n_views == 4
        assert cfg.templates == (1, 3, 5)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "gen.cfg"
        p.write_text("bogus=1\n")
        with pytest.raises(ValueError, match="unknown"):
            DatasetConfig.from_file(p)

    def test_v2_mode_has_small_objects_and_varied_elevation(self, tmp_path):
        cfg = DatasetConfig(
            seed=3, mode="v2", scenes_train=12, scenes_val=3, scenes_test=3, n_views=4
        )
        build_dataset(cfg, tmp_path)
        recs = read_shard(tmp_path / "train.mrts")
        sizes = {o.size for r in recs for o in r.scene.objects}
        assert sizes == {"small", "large"}
        els = np.array([c.elevation for r in recs for c in r.cameras[1:]])
        assert els.min() >= 20.0 and els.max() <= 30.0 and els.std() > 0.3
