"""Desk-scale toy-world experiments shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from . import augmentation as aug
from . import detector as det
from . import toy_world as tw
from . import training as tr
from .manifest import DatasetManifest

log = logging.getLogger(__name__)

NSM_SIM_FRAMES = 200  # sim frames reserved for sensor-model training; the rest is the augmentation pool


@dataclass
class ToyCorpus:
    root: Path
    sim: DatasetManifest
    real: DatasetManifest
    test: DatasetManifest

    @property
    def nsm_sim(self) -> DatasetManifest:
        return DatasetManifest(self.sim.entries[:NSM_SIM_FRAMES], self.sim.seed)

    @property
    def pool(self) -> DatasetManifest:
        return DatasetManifest(self.sim.entries[NSM_SIM_FRAMES:], self.sim.seed)


def desk_corpus(out: str | Path, seed: int, n_sim: int = 600, n_real: int = 200, n_test: int = 100) -> ToyCorpus:
    out = Path(out)
    c = tw.gen_corpus(tw.SceneSpec(), tw.CorruptionModel(), n_sim, n_real, n_test, seed, out)
    return ToyCorpus(out, c.sim, c.real, c.test)


def table1_direction(corpus: ToyCorpus, out: str | Path, seed: int, ratio: float = 2.0) -> dict[str, float]:
    """Sim-only, real-only, real+raw-sim and real+CycleGAN-sim mAP (percent) on the toy test split."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    cg = tr.train_cyclegan(tr.preset_config("cyclegan", seed=seed), corpus.nsm_sim, corpus.real)
    tr.save_checkpoint(out / "cyclegan.ckpt", cg.checkpoint)
    pool_path = corpus.pool.save(out / "pool.tsv")
    mc = aug.MatrixConfig(real=corpus.root / "real.tsv", sim=pool_path, test=corpus.root / "test.tsv",
                          out_dir=out / "matrix", ratios=(), mappings=("identity", "cyclegan"),
                          table_ratio=ratio, pure_sim_ratio=1.0,
                          checkpoints={"cyclegan": str(out / "cyclegan.ckpt")},
                          train=tr.preset_config("detector", seed=seed))
    cells = aug.run_experiment_matrix(mc)
    by_name = {
        "sim": cells[aug.MixSpec(1.0, pure_sim=True).tag],
        "real": cells[aug.MixSpec(0.0).tag],
        "real+sim": cells[aug.MixSpec(ratio).tag],
        "real+cyclegan": cells[aug.MixSpec(ratio, aug.MappingKind("cyclegan")).tag],
    }
    failed = {k: r.error for k, r in by_name.items() if r.error}
    if failed:
        raise RuntimeError(f"matrix cells failed: {failed}")
    result = {k: r.map_percent for k, r in by_name.items()}
    (out / "table1_direction.json").write_text(json.dumps(
        {"seed": seed, "map_percent": result, "seconds": time.perf_counter() - t0}, indent=1))
    return result


def style_selection(corpus: ToyCorpus, out: str | Path, seed: int, probe_ckpt: str | Path | None = None,
                    n_content: int = 100, n_probe: int = 100) -> aug.StyleRanking:
    """Two-style bank (a real medoid frame, a blank frame); returns the probe ranking.

    The probe is a real-only detector; a checkpoint from ``table1_direction`` can be reused.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    enc = tr.pretrain_encoder(tr.preset_config("encoder", seed=seed),
                              DatasetManifest(corpus.nsm_sim.entries[:100]), DatasetManifest(corpus.real.entries[:100]))
    bank = aug.build_style_bank(corpus.real, 1, seed)
    styles = torch.cat([bank.frames, torch.zeros_like(bank.frames)])
    nst = tr.train_nst(tr.preset_config("nst", seed=seed), DatasetManifest(corpus.nsm_sim.entries[:n_content]),
                       styles, tr.load_encoder(enc.checkpoint))
    tr.save_checkpoint(out / "nst.ckpt", nst.checkpoint)
    if probe_ckpt is None:
        res = det.train_detector(tr.preset_config("detector", seed=seed), det.DetectorConfig.desk(), corpus.real)
        probe_ckpt = out / "probe.ckpt"
        tr.save_checkpoint(probe_ckpt, res.checkpoint)
    probe, pcfg = det.load_detector(probe_ckpt)
    probe_set = DatasetManifest(corpus.pool.entries[-n_probe:])
    ranking = aug.select_best_style(nst.info["model"].transformer, 2, probe, pcfg, probe_set)
    (out / "style.json").write_text(json.dumps({"seed": seed, **ranking.to_json()}, indent=1))
    return ranking
