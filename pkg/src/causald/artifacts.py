"""On-disk layout for prepared datasets, checkpoints and teacher ensembles."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .data import ConsumedIndex, EvalSet, InteractionLog, PreparedData, SequenceStore, build_sequences, positive_pairs
from .distill import TeacherEnsemble
from .io import load_tensors, read_json, save_tensors, write_json
from .models import EncoderPredictor
from .synth import ScmConfig, ScmDataset

DATASET_FILE = "dataset.cdtn"
SCM_FILE = "scm_truth.cdtn"
SCM_SIDECAR = "scm_truth.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- datasets


def save_dataset(directory, log: InteractionLog, data: PreparedData | None) -> Path:
    arrays = {f"log.{k}": v for k, v in log.to_arrays().items()}
    if data is not None and data.evalset is not None:
        ev = data.evalset
        arrays.update(
            {
                "train.flat": data.store.flat,
                "train.offsets": data.store.offsets,
                "eval.users": ev.users,
                "eval.targets": ev.targets,
                "eval.negatives": ev.negatives,
                "eval.max_len": np.array([ev.max_len]),
                "n_neg": np.array([data.n_neg]),
            }
        )
    path = Path(directory) / DATASET_FILE
    save_tensors(path, arrays)
    return path


def load_log(directory) -> InteractionLog:
    a = load_tensors(Path(directory) / DATASET_FILE)
    return InteractionLog.from_arrays({k[4:]: v for k, v in a.items() if k.startswith("log.")})


def load_dataset(directory) -> tuple[InteractionLog, PreparedData]:
    a = load_tensors(Path(directory) / DATASET_FILE)
    log = InteractionLog.from_arrays({k[4:]: v for k, v in a.items() if k.startswith("log.")})
    store = SequenceStore(a["train.flat"].astype(np.int64), a["train.offsets"].astype(np.int64))
    evalset = EvalSet(
        store,
        a["eval.users"].astype(np.int64),
        a["eval.targets"].astype(np.int64),
        a["eval.negatives"].astype(np.int64),
        int(a["eval.max_len"][0]),
    )
    data = PreparedData(
        positive_pairs(store),
        evalset,
        log.n_users,
        log.n_items,
        ConsumedIndex.from_sequences(build_sequences(log.select(log.label > 0)), log.n_items),
        explicit=False,
        n_neg=int(a["n_neg"][0]),
    )
    return log, data


def save_synth(directory, dataset: ScmDataset) -> list[Path]:
    d = Path(directory)
    p1 = save_dataset(d, dataset.log, None)
    save_tensors(d / SCM_FILE, dataset.truth_arrays())
    write_json(d / SCM_SIDECAR, dataset.truth_sidecar())
    return [p1, d / SCM_FILE, d / SCM_SIDECAR]


def load_synth(directory) -> ScmDataset:
    d = Path(directory)
    side = read_json(d / SCM_SIDECAR)
    config = ScmConfig(**side["config"])
    return ScmDataset.from_arrays(config, load_log(d), load_tensors(d / SCM_FILE))


# ---------------------------------------------------------------- models


def save_model(stem, model: EncoderPredictor, extra_header: dict | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    weights = stem.with_suffix(".cdtn")
    header = stem.with_suffix(".json")
    save_tensors(weights, model.state_dict())
    write_json(header, {"model": model.header(), **(extra_header or {})})
    return weights, header


def load_model(stem) -> tuple[EncoderPredictor, dict]:
    stem = Path(stem)
    if stem.suffix in (".cdtn", ".json"):
        stem = stem.with_suffix("")
    header = read_json(stem.with_suffix(".json"))
    state = load_tensors(stem.with_suffix(".cdtn"))
    return EncoderPredictor.from_header(header["model"], state), header


def save_ensemble(directory, ensemble: TeacherEnsemble) -> Path:
    d = Path(directory)
    paths = []
    for k, t in enumerate(ensemble.teachers):
        w, _ = save_model(d / f"teacher-{k}", t, {"group": k})
        paths.append(w.name)
    manifest = d / "ensemble.json"
    write_json(
        manifest,
        {
            "checkpoints": paths,
            "pz": [float(x) for x in ensemble.pz],
            "group_sizes": [int(x) for x in ensemble.group_sizes],
            "split_attribute": ensemble.attribute,
            "seeds": [int(s) for s in ensemble.seeds],
        },
    )
    return manifest


def load_ensemble(directory) -> TeacherEnsemble:
    d = Path(directory)
    m = read_json(d / "ensemble.json")
    teachers = [load_model(d / name)[0].frozen() for name in m["checkpoints"]]
    return TeacherEnsemble(teachers, np.array(m["pz"]), np.array(m["group_sizes"]), m["split_attribute"], m["seeds"])
