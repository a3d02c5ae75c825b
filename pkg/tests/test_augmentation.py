import csv
import hashlib
import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from lidar_nsm import augmentation as aug
from lidar_nsm import bev
from lidar_nsm import detector as det
from lidar_nsm import sensor_models as sm
from lidar_nsm import tensor_core as tc
from lidar_nsm.augmentation import AugmentError, MixSpec
from lidar_nsm.manifest import DatasetManifest
from lidar_nsm.sensor_models import MappingKind
from lidar_nsm.toy_world import drive_of
from lidar_nsm.training import preset_config


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- manifests ----------------------------------------------------------------------


def test_manifest_round_trip(tiny_corpus, tmp_path):
    man = tiny_corpus.real
    path = man.save(tmp_path / "sub" / "m.tsv")
    back = DatasetManifest.load(path)
    assert back.entries == man.entries and back.seed == man.seed
    assert back.content_hash == man.content_hash
    # paths are written relative to the manifest's directory
    assert not path.read_text().splitlines()[1].startswith("/")


def test_manifest_hash_tracks_entries_and_order(tiny_corpus):
    e = tiny_corpus.real.entries
    h = DatasetManifest(e).content_hash
    assert DatasetManifest(list(e), seed=99).content_hash == h
    assert DatasetManifest(e[1:]).content_hash != h
    assert DatasetManifest([e[1], e[0], *e[2:]]).content_hash != h


def test_manifest_load_errors(tiny_corpus, tmp_path):
    (tmp_path / "bad.tsv").write_text("a.npy\tb.txt\tmars\tidentity\n")
    with pytest.raises(ValueError, match="domain"):
        DatasetManifest.load(tmp_path / "bad.tsv")
    (tmp_path / "short.tsv").write_text("a.npy\tb.txt\n")
    with pytest.raises(ValueError, match="4 tab"):
        DatasetManifest.load(tmp_path / "short.tsv")
    (tmp_path / "gone.tsv").write_text("a.npy\tb.txt\treal\tidentity\n")
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "gone.tsv")


# -- mixing -------------------------------------------------------------------------


def test_ratio_zero_is_the_real_manifest(tiny_corpus, tmp_path):
    man = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(0.0), tmp_path)
    assert man.entries == tiny_corpus.real.entries
    assert not (tmp_path / "frames").exists()


@pytest.mark.parametrize("ratio, n_sim", [(1.0, 16), (0.5, 8), (1.25, 20)])
def test_counts(tiny_corpus, tmp_path, ratio, n_sim):
    man = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(ratio), tmp_path, seed=1)
    assert sum(e.domain == "sim" for e in man) == n_sim
    assert sum(e.domain == "real" for e in man) == 16
    assert DatasetManifest.load(tmp_path / "manifest.tsv").entries == man.entries


def test_identity_frames_and_labels_are_byte_copies(tiny_corpus, tmp_path):
    man = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(1.0), tmp_path, seed=2)
    src = {e.frame_id: e for e in tiny_corpus.sim}
    sims = [e for e in man if e.domain == "sim"]
    for e in sims:
        orig = src[e.frame_id.split("_", 1)[1]]
        assert digest(e.frame) == digest(orig.frame)
        assert e.label.read_bytes() == orig.label.read_bytes()
        assert e.mapping == "identity"


def test_mapping_changes_frames_not_labels(tiny_corpus, tmp_path):
    g = sm.Generator(sm.CycleGanArch(ngf=4, n_down=1, n_res=1))
    tc.init_weights(g, 0)
    spec = MixSpec(0.5, MappingKind("cyclegan"))
    man = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, spec, tmp_path, g, seed=2)
    src = {e.frame_id: e for e in tiny_corpus.sim}
    for e in (e for e in man if e.domain == "sim"):
        orig = src[e.frame_id.split("_", 1)[1]]
        assert e.label.read_bytes() == orig.label.read_bytes()
        cells = bev.load_frame(e.frame).cells
        assert set(np.unique(cells)) <= {0.0, 1.0}
        assert e.mapping == "cyclegan"


def test_insufficient_pool(tiny_corpus, tmp_path):
    with pytest.raises(AugmentError, match="need 32"):
        aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(2.0), tmp_path)
    man = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(2.0, replacement=True), tmp_path)
    assert sum(e.domain == "sim" for e in man) == 32


def test_excluded_frames_never_sampled(tiny_corpus, tmp_path):
    banned = tiny_corpus.sim.frame_ids()[:12]
    man = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(0.75), tmp_path,
                                       exclude_ids=banned)
    used = {e.frame_id.split("_", 1)[1] for e in man if e.domain == "sim"}
    assert len(used) == 12 and not used & set(banned)
    with pytest.raises(AugmentError):
        aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(1.0), tmp_path, exclude_ids=banned)
    overlap = MixSpec(1.0, allow_overlap=True)
    assert len(aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, overlap, tmp_path,
                                            exclude_ids=banned)) == 32


def test_pure_sim_has_no_real_entries(tiny_corpus, tmp_path):
    man = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(1.0, pure_sim=True), tmp_path)
    assert len(man) == 16 and {e.domain for e in man} == {"sim"}
    with pytest.raises(AugmentError):
        MixSpec(0.0, pure_sim=True)
    with pytest.raises(AugmentError):
        MixSpec(-1.0)


def test_mixing_is_seeded(tiny_corpus, tmp_path):
    a = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(1.0), tmp_path / "a", seed=4)
    b = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(1.0), tmp_path / "b", seed=4)
    c = aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(1.0), tmp_path / "c", seed=5)
    assert a.frame_ids() == b.frame_ids() != c.frame_ids()
    # the real frames are interleaved, not appended
    assert [e.domain for e in a][:16] != ["real"] * 16


def test_non_identity_needs_network(tiny_corpus, tmp_path):
    with pytest.raises(AugmentError, match="network"):
        aug.build_augmented_manifest(tiny_corpus.real, tiny_corpus.sim, MixSpec(1.0, MappingKind("cyclegan")), tmp_path)
    with pytest.raises(AugmentError, match="checkpoint"):
        aug.load_mapping_network(MappingKind("nst", 0), None)
    assert aug.load_mapping_network(MappingKind(), None) is None


# -- style bank ---------------------------------------------------------------------


def test_block_means():
    cells = np.zeros((26, 26))
    cells[:2, :2] = 1.0
    d = aug.block_means(cells)
    assert d.shape == (169,) and d[0] == 1.0 and d[1:].sum() == 0.0
    assert aug.block_means(np.ones((64, 64))).tolist() == [1.0] * 169


def test_single_style_is_the_frame_nearest_the_mean(tiny_corpus):
    bank = aug.build_style_bank(tiny_corpus.real, 1, seed=0)
    assert len(bank) == 1 and len(bank.drive_groups[0]) == 4
    frames = [bev.load_frame(e.frame).cells for e in tiny_corpus.real]
    desc = np.stack([aug.block_means(f) for f in frames])
    drives = sorted({drive_of(f) for f in tiny_corpus.real.frame_ids()})
    ids = tiny_corpus.real.frame_ids()
    centre = np.mean([desc[[i for i, f in enumerate(ids) if drive_of(f) == d]].mean(0) for d in drives], axis=0)
    want = ids[int(np.argmin(np.linalg.norm(desc - centre, axis=1)))]
    assert bank.frame_ids == [want]
    assert torch.equal(bank.frames[0, 0], torch.from_numpy(frames[ids.index(want)]))


def test_style_bank_is_seeded_and_partitions_drives(tiny_corpus):
    a = aug.build_style_bank(tiny_corpus.real, 3, seed=7)
    b = aug.build_style_bank(tiny_corpus.real, 3, seed=7)
    assert a.frame_ids == b.frame_ids and torch.equal(a.frames, b.frames)
    groups = [d for g in a.drive_groups for d in g]
    assert sorted(groups) == sorted({drive_of(f) for f in tiny_corpus.real.frame_ids()})
    for fid, g in zip(a.frame_ids, a.drive_groups):
        assert drive_of(fid) in g


def test_style_bank_errors(tiny_corpus):
    with pytest.raises(AugmentError, match="only 4 drives"):
        aug.build_style_bank(tiny_corpus.real, 5)
    with pytest.raises(AugmentError):
        aug.build_style_bank(tiny_corpus.real, 0)


# -- style selection ----------------------------------------------------------------


class StyleSwitch(nn.Module):
    """Style k passes frames through untouched, or blanks them."""

    def __init__(self, blank):
        super().__init__()
        self.blank = blank

    def forward(self, x, style):
        return torch.zeros_like(x) if self.blank[int(style)] else x


class OracleProbe(nn.Module):
    """Emits confident ground-truth boxes for any non-empty frame it was primed with."""

    def __init__(self, manifest, cfg):
        super().__init__()
        self.raw = {}
        for e in manifest:
            key = bev.load_frame(e.frame).cells.tobytes()
            self.raw[key] = det.targets_to_raw(det.encode_targets(bev.read_labels(e.label), cfg), cfg)
        self.empty = det.targets_to_raw(det.encode_targets([], cfg), cfg)

    def forward(self, x):
        return torch.stack([self.raw.get(f[0].numpy().tobytes(), self.empty) for f in x])


@pytest.fixture
def probe_set(tiny_corpus):
    return DatasetManifest(tiny_corpus.sim.entries[:6])


def test_selection_prefers_the_informative_style(probe_set):
    cfg = det.DetectorConfig.desk()
    probe = OracleProbe(probe_set, cfg)
    r = aug.select_best_style(StyleSwitch([True, False]), 2, probe, cfg, probe_set)
    assert r.best == 1 and r.map_by_style[1] == 1.0 and r.map_by_style[0] == 0.0
    assert r.order == [1, 0]
    assert json.loads(json.dumps(r.to_json()))["ranking"] == [1, 0]


def test_identical_styles_pick_index_zero(probe_set):
    cfg = det.DetectorConfig.desk()
    probe = OracleProbe(probe_set, cfg)
    r = aug.select_best_style(StyleSwitch([False, False, False]), 3, probe, cfg, probe_set)
    assert r.best == 0 and len(set(r.map_by_style)) == 1


def test_single_style_and_empty_inputs(probe_set):
    cfg = det.DetectorConfig.desk()
    probe = OracleProbe(probe_set, cfg)
    assert aug.select_best_style(StyleSwitch([True]), 1, probe, cfg, probe_set).best == 0
    with pytest.raises(AugmentError):
        aug.select_best_style(StyleSwitch([]), 0, probe, cfg, probe_set)
    with pytest.raises(AugmentError):
        aug.select_best_style(StyleSwitch([False]), 1, probe, cfg, DatasetManifest())


# -- matrix -------------------------------------------------------------------------


def _matrix(tiny_corpus, out):
    return aug.MatrixConfig(
        real=tiny_corpus.paths["real"], sim=tiny_corpus.paths["sim"], test=tiny_corpus.paths["test"],
        out_dir=out, ratios=(0, 1), mappings=("identity", "cyclegan"), table_ratio=1.0,
        train=preset_config("detector", epochs=1, batch_size=8),
        detector=det.DetectorConfig.desk(channels=(4, 4, 4, 4, 4, 4)))


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_small_matrix_records_failures_and_reproduces(tiny_corpus, tmp_path):
    res = aug.run_experiment_matrix(_matrix(tiny_corpus, tmp_path / "a"))
    table = _rows(tmp_path / "a" / "table1.csv")
    assert table[0] == ["training_data", "map_percent", "reference_map_percent"]
    assert [r[2] for r in table[1:]] == ["12.1", "63.1", "65.3", "71.5"]
    assert [r[0] for r in table[1:]] == ["sim", "real", "real+sim", "real+cyclegan"]
    assert math.isnan(float(table[4][1])) and all(math.isfinite(float(r[1])) for r in table[1:4])
    failures = json.loads((tmp_path / "a" / "failures.json").read_text())
    assert set(failures) == {"real+1x-cyclegan"} and "checkpoint" in failures["real+1x-cyclegan"]
    curve = _rows(tmp_path / "a" / "curve.csv")
    assert curve[0] == ["ratio", "mapping", "map_percent"] and len(curve) == 5
    # the real-only cell is shared by every mapping
    assert curve[1][2] == curve[2][2] == table[2][1]
    assert res["real+0x-identity"].error is None
    for tag in ("real+0x-identity", "real+1x-identity", "sim1x-identity"):
        cell = tmp_path / "a" / "cells" / tag
        assert (cell / "eval.json").exists() and (cell / "detector.ckpt").exists()

    aug.run_experiment_matrix(_matrix(tiny_corpus, tmp_path / "b"))
    for name in ("table1.csv", "curve.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
