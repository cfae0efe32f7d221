"""End-to-end orchestration: synth, staged training, evaluation, ablation.

Layout under ``cfg.out_dir``:

    dataset/        synthetic corpus (unless an external one is passed)
    checkpoints/    teacher.w2c, student_s2_1.w2c, student.w2c,
                    decoder.w2c, prefix.w2c (+ student model cards)
    logs/           per-step CSV per stage
    reports/        eval_<split>.json, sim_<split>.csv/.png, ablation.csv
    manifest.json   append-only artifact log with content hashes

All randomness flows from ``cfg.seed`` through named substreams, so
toggling one stage never changes another stage's draws.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from wifi2cap import generator, metrics
from wifi2cap.config import RunConfig, config_hash, substream_seed
from wifi2cap.student import (
    init_student,
    load_student,
    save_student,
    train_stage2_1_align,
    train_stage2_2_text,
)
from wifi2cap.synth.dataset import Dataset, SplitArrays, generate_dataset
from wifi2cap.teacher import init_teacher, load_teacher, train_teacher
from wifi2cap.tensorio import file_sha256


class PipelineError(RuntimeError):
    pass


@dataclass
class RunPaths:
    root: Path
    dataset: Path
    checkpoints: Path
    logs: Path
    reports: Path

    @classmethod
    def for_config(cls, cfg: RunConfig, dataset_dir: str | Path | None = None) -> "RunPaths":
        root = Path(cfg.out_dir)
        return cls(
            root=root,
            dataset=Path(dataset_dir) if dataset_dir else root / "dataset",
            checkpoints=root / "checkpoints",
            logs=root / "logs",
            reports=root / "reports",
        )

    def make_dirs(self) -> None:
        for p in (self.root, self.checkpoints, self.logs, self.reports):
            p.mkdir(parents=True, exist_ok=True)


class RunManifest:
    """Append-only artifact log; every entry's hash must keep verifying."""

    def __init__(self, root: Path):
        self.path = Path(root) / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"schema_version": 1, "entries": []}

    def record(self, artifact: str, path: Path, stage: str, wall_seconds: float) -> None:
        self.data["entries"].append({
            "artifact": artifact,
            "path": str(path),
            "sha256": file_sha256(path),
            "stage": stage,
            "wall_seconds": round(wall_seconds, 3),
        })
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")

    def verify(self) -> list[str]:
        problems = []
        for e in self.data["entries"]:
            p = Path(e["path"])
            if not p.exists():
                problems.append(f"missing artifact: {p}")
            elif file_sha256(p) != e["sha256"]:
                problems.append(f"hash mismatch: {p}")
        return problems


def _determinism() -> None:
    torch.use_deterministic_algorithms(True)


def cmd_synth(cfg: RunConfig, dataset_dir: str | Path | None = None) -> Dataset:
    """Generate the corpus and record it in the run manifest."""
    _determinism()
    paths = RunPaths.for_config(cfg, dataset_dir)
    paths.make_dirs()
    t0 = time.perf_counter()
    ds = generate_dataset(cfg.data, substream_seed(cfg.seed, "dataset"), paths.dataset)
    manifest = RunManifest(paths.root)
    manifest.record("dataset", paths.dataset / "manifest.json", "synth", time.perf_counter() - t0)
    return ds


def _load_dataset(paths: RunPaths) -> Dataset:
    if not (paths.dataset / "manifest.json").exists():
        raise PipelineError(
            f"no dataset at {paths.dataset}; run the synth command first"
        )
    return Dataset.load(paths.dataset)


def _teacher_for(cfg: RunConfig, ds: Dataset, paths: RunPaths):
    """Trained teacher if stage 1 produced one, else the seeded init.

    Text-alignment without stage 1 (the ablation arm) still needs a frozen
    text projection; a seeded untrained teacher provides it.
    """
    ckpt = paths.checkpoints / "teacher.w2c"
    if ckpt.exists():
        model, _ = load_teacher(ckpt)
        return model
    model = init_teacher(cfg, ds.config)
    model.eval()
    return model


def _student_source(cfg: RunConfig, paths: RunPaths) -> Path:
    """The CSI encoder checkpoint stage 3 should condition on."""
    for name in ("student.w2c", "student_s2_1.w2c"):
        p = paths.checkpoints / name
        if p.exists():
            return p
    if cfg.baseline:
        return _write_untrained_student(cfg, paths)
    raise PipelineError(
        "stage s3 requires a student checkpoint; run stage s2_2 (or s2_1) first, "
        "or set baseline: true for the untrained-alignment arm"
    )


def _write_untrained_student(cfg: RunConfig, paths: RunPaths) -> Path:
    ds = _load_dataset(paths)
    model = init_student(cfg, ds.config)
    model.eval()
    path = paths.checkpoints / "student_untrained.w2c"
    save_student(model, path, cfg, [], 0)
    return path


def encode_split(student, ds: Dataset, split: str, batch: int = 32) -> tuple[np.ndarray, SplitArrays]:
    """Pooled CSI embeddings for every clip of a split (eval mode)."""
    arrays = SplitArrays.from_dataset(ds, split, with_mirrors=False)
    amp = torch.from_numpy(arrays.amp)
    pha = torch.from_numpy(arrays.pha)
    mask = torch.from_numpy(arrays.receiver_mask)
    student.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(arrays), batch):
            outs.append(student.encode_clip(amp[i : i + batch], pha[i : i + batch], mask[i : i + batch]))
    return torch.cat(outs).numpy(), arrays


def cmd_train(cfg: RunConfig, stages: tuple[str, ...] | None = None,
              dataset_dir: str | Path | None = None,
              shared_decoder: str | Path | None = None) -> dict[str, Path]:
    """Run the selected stages in dependency order; returns artifact paths."""
    _determinism()
    stages = tuple(stages or cfg.stages)
    paths = RunPaths.for_config(cfg, dataset_dir)
    paths.make_dirs()
    ds = _load_dataset(paths)
    manifest = RunManifest(paths.root)
    artifacts: dict[str, Path] = {}

    if "s1" in stages:
        t0 = time.perf_counter()
        ckpt = train_teacher(ds, cfg, paths.checkpoints, log_dir=paths.logs)
        manifest.record("teacher", ckpt, "s1", time.perf_counter() - t0)
        artifacts["teacher"] = ckpt

    if "s2_1" in stages:
        teacher_ckpt = paths.checkpoints / "teacher.w2c"
        if not teacher_ckpt.exists():
            raise PipelineError("stage s2_1 requires a teacher checkpoint; run stage s1 first")
        teacher, _ = load_teacher(teacher_ckpt)
        t0 = time.perf_counter()
        ckpt = train_stage2_1_align(ds, teacher, cfg, paths.checkpoints, log_dir=paths.logs)
        manifest.record("student_s2_1", ckpt, "s2_1", time.perf_counter() - t0)
        artifacts["student_s2_1"] = ckpt

    if "s2_2" in stages:
        teacher = _teacher_for(cfg, ds, paths)
        init_ckpt = paths.checkpoints / "student_s2_1.w2c"
        t0 = time.perf_counter()
        ckpt = train_stage2_2_text(
            ds, teacher, cfg, paths.checkpoints,
            init_ckpt=init_ckpt if init_ckpt.exists() else None,
            log_dir=paths.logs,
        )
        manifest.record("student", ckpt, "s2_2", time.perf_counter() - t0)
        artifacts["student"] = ckpt

    if "s3" in stages:
        train_arrays = SplitArrays.from_dataset(ds, "train", with_mirrors=False)
        decoder_path = paths.checkpoints / "decoder.w2c"
        if shared_decoder is not None:
            decoder, _ = generator.load_decoder(shared_decoder)
            decoder_path = Path(shared_decoder)
        elif decoder_path.exists():
            decoder, _ = generator.load_decoder(decoder_path)
        else:
            t0 = time.perf_counter()
            decoder = generator.pretrain_decoder(
                train_arrays.tokens, train_arrays.lengths, len(ds.tokenizer),
                cfg.decoder, substream_seed(cfg.seed, "s3_pretrain"),
                log_path=paths.logs / "s3_pretrain_steps.csv",
            )
            generator.save_decoder(decoder, decoder_path, cfg, cfg.decoder.pretrain_steps, ds.tokenizer.vocab)
            manifest.record("decoder", decoder_path, "s3", time.perf_counter() - t0)
        artifacts["decoder"] = decoder_path

        student_path = _student_source(cfg, paths)
        student, _ = load_student(student_path)
        emb, _ = encode_split(student, ds, "train")
        t0 = time.perf_counter()
        prefix = generator.train_prefix(
            emb, train_arrays.tokens, train_arrays.lengths, decoder, cfg.decoder,
            substream_seed(cfg.seed, "s3_prefix"),
            log_path=paths.logs / "s3_prefix_steps.csv",
        )
        prefix_path = paths.checkpoints / "prefix.w2c"
        generator.save_prefix_map(prefix, prefix_path, cfg, cfg.decoder.prefix_steps)
        # remember which encoder conditioned the prefixes
        meta_note = paths.checkpoints / "prefix.source.json"
        meta_note.write_text(json.dumps({
            "student_checkpoint": str(student_path),
            "student_sha256": file_sha256(student_path),
        }, indent=1, sort_keys=True) + "\n")
        manifest.record("prefix_map", prefix_path, "s3", time.perf_counter() - t0)
        artifacts["prefix"] = prefix_path

    return artifacts


def cmd_eval(cfg: RunConfig, split: str = "test",
             dataset_dir: str | Path | None = None) -> metrics.EvalReport:
    """Generate captions on a split and score everything into an EvalReport."""
    _determinism()
    paths = RunPaths.for_config(cfg, dataset_dir)
    paths.make_dirs()
    ds = _load_dataset(paths)
    if split not in ds.manifest["splits"]:
        raise PipelineError(f"split {split!r} not in dataset (have {sorted(ds.manifest['splits'])})")

    prefix_path = paths.checkpoints / "prefix.w2c"
    decoder_path = paths.checkpoints / "decoder.w2c"
    if not prefix_path.exists() or not decoder_path.exists():
        raise PipelineError("evaluation requires stage s3 artifacts; run stage s3 first")
    decoder, _ = generator.load_decoder(decoder_path)
    prefix_map, _ = generator.load_prefix_map(prefix_path)
    source = json.loads((paths.checkpoints / "prefix.source.json").read_text())
    student, _ = load_student(source["student_checkpoint"])
    teacher = _teacher_for(cfg, ds, paths)

    emb, arrays = encode_split(student, ds, split)
    emb_t = torch.from_numpy(emb)

    generated = []
    truncated = 0
    for i in range(len(arrays)):
        g = generator.generate_caption(emb_t[i], decoder, prefix_map, ds.tokenizer,
                                       max_len=cfg.decoder.max_len)
        generated.append(g.text)
        truncated += int(g.truncated)

    references = arrays.captions
    scores = metrics.score_corpus(generated, references)

    with torch.no_grad():
        text_emb = teacher.encode_text(torch.from_numpy(arrays.text)).numpy()
    top1, sim = metrics.retrieval_top1(emb, text_emb)
    heat_base = paths.reports / f"sim_{split}"
    metrics.export_similarity_heat(sim, heat_base)

    dir_rows = [i for i in range(len(arrays)) if arrays.directions[i] != "none"]
    dir_acc = None
    if dir_rows:
        dir_acc = metrics.direction_accuracy(
            [generated[i] for i in dir_rows],
            [arrays.directions[i] for i in dir_rows],
            ds.lexicon,
        )

    per_clip = []
    for i in range(len(arrays)):
        entry = {
            "id": arrays.ids[i],
            "generated": generated[i],
            "reference": references[i],
            "rouge_l": 100.0 * metrics.sentence_rouge_l(generated[i], references[i]),
            "meteor_lite": 100.0 * metrics.sentence_meteor_lite(generated[i], references[i]),
        }
        if arrays.directions[i] != "none":
            entry["direction"] = arrays.directions[i]
        per_clip.append(entry)

    report = metrics.EvalReport(
        config_hash=config_hash(cfg),
        split=split,
        scores=scores,
        retrieval_top1=top1,
        direction_accuracy=dir_acc,
        per_clip=per_clip,
        metadata={
            "seed": cfg.seed,
            "n_clips": len(arrays),
            "truncated_generations": truncated,
            "dataset_hash": ds.content_hash(),
        },
    )
    report_path = paths.reports / f"eval_{split}.json"
    report.save(report_path)
    RunManifest(paths.root).record(f"eval_{split}", report_path, "eval", 0.0)
    return report


ABLATION_ARMS = (
    # name, stages, mirror, baseline
    ("baseline", ("s3",), "full", True),
    ("s2_2+s3", ("s2_2", "s3"), "full", False),
    ("s1+s2_1+s3", ("s1", "s2_1", "s3"), "full", False),
    ("mirror_off", ("s1", "s2_1", "s2_2", "s3"), "off", False),
    ("mirror_teacher", ("s1", "s2_1", "s2_2", "s3"), "teacher", False),
    ("full", ("s1", "s2_1", "s2_2", "s3"), "full", False),
)


def cmd_ablate(cfg: RunConfig, split: str = "test",
               arms=ABLATION_ARMS) -> tuple[Path, list[dict]]:
    """Run the stage/mirror grid over one shared dataset; emit a CSV table.

    Arms run sequentially with the same root seed. Failed arms are marked
    in the table, completed arms keep their scores.
    """
    _determinism()
    paths = RunPaths.for_config(cfg)
    paths.make_dirs()
    if not (paths.dataset / "manifest.json").exists():
        cmd_synth(cfg)
    ds = _load_dataset(paths)

    # The caption LM depends only on the dataset and the s3 substream, so
    # all arms share one pretrained decoder.
    shared_decoder = paths.checkpoints / "decoder.w2c"
    if not shared_decoder.exists():
        train_arrays = SplitArrays.from_dataset(ds, "train", with_mirrors=False)
        decoder = generator.pretrain_decoder(
            train_arrays.tokens, train_arrays.lengths, len(ds.tokenizer),
            cfg.decoder, substream_seed(cfg.seed, "s3_pretrain"),
            log_path=paths.logs / "s3_pretrain_steps.csv",
        )
        generator.save_decoder(decoder, shared_decoder, cfg, cfg.decoder.pretrain_steps, ds.tokenizer.vocab)

    rows = []
    for name, stages, mirror, baseline in arms:
        arm_cfg = replace(
            cfg,
            out_dir=str(paths.root / "arms" / name),
            stages=stages,
            mirror=mirror,
            baseline=baseline,
        )
        row = {
            "arm": name,
            "s1": "y" if "s1" in stages else "-",
            "s2_1": "y" if "s2_1" in stages else "-",
            "s2_2": "y" if "s2_2" in stages else "-",
            "s3": "y" if "s3" in stages else "-",
            "mirror": mirror if not baseline else "n/a",
        }
        try:
            cmd_train(arm_cfg, dataset_dir=paths.dataset, shared_decoder=shared_decoder)
            report = cmd_eval(arm_cfg, split=split, dataset_dir=paths.dataset)
            row.update({
                "bleu4": f"{report.scores['bleu4']:.2f}",
                "meteor_lite": f"{report.scores['meteor_lite']:.2f}",
                "rouge_l": f"{report.scores['rouge_l']:.2f}",
                "cider_d": f"{report.scores['cider_d']:.3f}",
                "retrieval_top1": f"{report.retrieval_top1:.3f}",
                "direction_acc": "" if report.direction_accuracy is None
                                 else f"{report.direction_accuracy:.3f}",
                "status": "ok",
            })
        except Exception as e:  # partial-failure policy: mark, keep going
            row.update({
                "bleu4": "", "meteor_lite": "", "rouge_l": "", "cider_d": "",
                "retrieval_top1": "", "direction_acc": "",
                "status": f"failed: {type(e).__name__}: {e}",
            })
        rows.append(row)

    csv_path = paths.reports / "ablation.csv"
    fields = ["arm", "s1", "s2_1", "s2_2", "s3", "mirror",
              "bleu4", "meteor_lite", "rouge_l", "cider_d",
              "retrieval_top1", "direction_acc", "status"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    RunManifest(paths.root).record("ablation_table", csv_path, "ablate", 0.0)
    return csv_path, rows


def cmd_viz(cfg: RunConfig, split: str = "test",
            dataset_dir: str | Path | None = None) -> tuple[Path, Path]:
    """Export the CSI-text similarity heatmap for a trained run."""
    _determinism()
    paths = RunPaths.for_config(cfg, dataset_dir)
    ds = _load_dataset(paths)
    source_file = paths.checkpoints / "prefix.source.json"
    if source_file.exists():
        student, _ = load_student(json.loads(source_file.read_text())["student_checkpoint"])
    elif (paths.checkpoints / "student.w2c").exists():
        student, _ = load_student(paths.checkpoints / "student.w2c")
    else:
        raise PipelineError("no student checkpoint to visualize; train first")
    teacher = _teacher_for(cfg, ds, paths)
    emb, arrays = encode_split(student, ds, split)
    with torch.no_grad():
        text_emb = teacher.encode_text(torch.from_numpy(arrays.text)).numpy()
    _, sim = metrics.retrieval_top1(emb, text_emb)
    return metrics.export_similarity_heat(sim, paths.reports / f"sim_{split}")
