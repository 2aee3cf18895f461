"""Stage the full cascade with per-stage checkpointing, plus parameter sweeps
and the dataset split.

Stages run in a fixed dependency order; each stage persists its outputs
before the next begins and is recorded in a ledger with content digests of
its inputs, outputs, and the config subset it reads. A stage reruns only if
one of those digests changed or the caller forces it, so an interrupted run
resumes to the same ledger an uninterrupted run produces.

With the default configuration (one masking-augmentation cycle, two
self-training rounds) the pipeline is nine stages:

    label -> cam_q0 -> amda -> cam_q1 -> sam_pseudo -> train_round1
          -> s3f -> train_round2 -> eval

Workdir layout: input/, labels/, cams/{q0,q1}/, amda/, pseudo/{sam,round1,
reseg}/, models/, reports/. The label stage also materializes normalized
volumes and original-intensity brain masks under labels/, which every later
stage reuses instead of recomputing.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import labeling, metrics, pseudolabel, s3f, tensorio
from .backends import AnalyticBackend, AnalyticSettings, Backend
from .backends.external import ExternalBackend
from .config import PipelineConfig
from .errors import ConfigError, DependencyError
from .labeling import CamMap
from .seeding import derive_seed, rng_for
from .volume import Volume, as_mask, prepare

SPLIT_NAMES = ("train", "val", "test")


# ---------------------------------------------------------------------------
# dataset split


def split_dataset(volume_ids, fractions, seed):
    """Seeded shuffle then contiguous cuts; sizes are floors of the exact
    shares with the remainder distributed by descending fractional part."""
    ids = sorted(str(v) for v in volume_ids)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"need three nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    nonzero = sum(1 for f in fractions if f > 0)
    if len(ids) < nonzero:
        raise ConfigError(f"{len(ids)} volumes cannot cover {nonzero} nonempty splits")
    rng = rng_for(seed, "split")
    order = list(rng.permutation(len(ids)))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    exact = [f * n for f in fractions]
    counts = [int(e) for e in exact]
    remainder = n - sum(counts)
    by_frac = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(remainder):
        counts[by_frac[i % 3]] += 1
    out = []
    start = 0
    for c in counts:
        out.append(shuffled[start : start + c])
        start += c
    return tuple(out)


# ---------------------------------------------------------------------------
# ledger


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 20):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class Ledger:
    path: str
    stages: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Ledger":
        if os.path.exists(path):
            obj = _read_json(path)
            return cls(path=path, stages=obj.get("stages", {}))
        return cls(path=path)

    def save(self) -> None:
        _write_json(self.path, {"version": 1, "stages": self.stages})

    def comparable(self) -> dict:
        """Deterministic view: everything except wall-clock durations."""
        out = {}
        for name, entry in self.stages.items():
            out[name] = {k: v for k, v in entry.items() if k != "duration_s"}
        return out


# ---------------------------------------------------------------------------
# run context


@dataclass
class RunContext:
    config: PipelineConfig
    workdir: str
    ids: list[str]
    split: dict
    backend: Backend
    _prepared: dict = field(default_factory=dict)

    def path(self, *parts) -> str:
        return os.path.join(self.workdir, *parts)

    def rel(self, path) -> str:
        return os.path.relpath(path, self.workdir).replace(os.sep, "/")

    @property
    def train_ids(self):
        return self.split["train"]

    @property
    def val_ids(self):
        return self.split["val"]

    @property
    def test_ids(self):
        return self.split["test"]

    def working_ids(self):
        """Volumes the pre-eval stages may touch: train plus validation."""
        return self.train_ids + self.val_ids

    def input_volume(self, vid) -> str:
        return self.path("input", "volumes", f"{vid}.tns")

    def normalized_path(self, vid) -> str:
        return self.path("labels", "normalized", f"{vid}.tns")

    def brain_path(self, vid) -> str:
        return self.path("labels", "brain", f"{vid}.tns")

    def labels_path(self, vid) -> str:
        return self.path("labels", f"{vid}.json")

    def prepared(self, vid):
        """Normalized volume + original brain mask, cached per run."""
        if vid not in self._prepared:
            norm = tensorio.read_tensor(self.normalized_path(vid))
            brain = tensorio.read_tensor(self.brain_path(vid))
            volume = Volume(
                norm.array, spacing=norm.spacing or self.config.spacing_default, id=vid
            )
            self._prepared[vid] = (volume, as_mask(brain.array))
        return self._prepared[vid]

    def slice_labels(self, vid) -> list[int]:
        return [int(v) for v in _read_json(self.labels_path(vid))["labels"]]

    def cam_stack(self, cam_dir, vid) -> np.ndarray:
        return tensorio.read_tensor(self.path("cams", cam_dir, f"{vid}.tns")).array

    def pmap(self, fn, items):
        """Order-preserving map, parallel across volumes when jobs > 1."""
        items = list(items)
        if self.config.jobs <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
            return list(pool.map(fn, items))


def make_backend(config: PipelineConfig) -> Backend:
    spec = config.backend
    if spec == "analytic" or (isinstance(spec, dict) and spec.get("kind") == "analytic"):
        return AnalyticBackend(
            AnalyticSettings(tau=config.region_grow_tau, seed=config.seed)
        )
    if isinstance(spec, dict) and spec.get("kind") == "external":
        if "cmd" in spec:
            return ExternalBackend(cmd=spec["cmd"], connections=config.jobs)
        if "address" in spec:
            host, _, port = str(spec["address"]).rpartition(":")
            return ExternalBackend(address=(host, int(port)), connections=config.jobs)
        raise ConfigError("external backend needs 'cmd' or 'address'")
    raise ConfigError(f"unknown backend spec {spec!r}")


# ---------------------------------------------------------------------------
# stage implementations


def _slice_cam(ctx: RunContext, image) -> np.ndarray:
    maps = ctx.backend.gradient_maps(image)
    layer_maps = []
    for layer_id in sorted(maps.layers):
        acts = maps.activations.get(layer_id) if maps.activations else None
        layer_maps.append(
            labeling.layer_cam(
                maps.layers[layer_id],
                layer_id=layer_id,
                activations=acts,
                formula=ctx.config.cam_formula,
            )
        )
    fused = labeling.fuse_and_upsample(layer_maps, image.shape)
    return fused.values.astype(np.float32)


def stage_label(ctx: RunContext) -> None:
    os.makedirs(ctx.path("labels", "normalized"), exist_ok=True)
    os.makedirs(ctx.path("labels", "brain"), exist_ok=True)
    texts = [ctx.backend.embed_text(t) for t in ctx.config.text_prompts]

    def one(vid):
        record = tensorio.read_tensor(ctx.input_volume(vid))
        prep = prepare(
            Volume(
                record.array,
                spacing=record.spacing or ctx.config.spacing_default,
                id=vid,
            )
        )
        volume, brain = prep.volume, prep.brain
        tensorio.write_tensor(
            ctx.normalized_path(vid), volume.voxels, spacing=volume.spacing, tensor_id=vid
        )
        tensorio.write_tensor(
            ctx.brain_path(vid), brain, spacing=volume.spacing, tensor_id=vid
        )
        labels = []
        for d in range(volume.shape[0]):
            probs = labeling.clip_probabilities(
                ctx.backend.embed_image(volume.voxels[d]), texts
            )
            labels.append(labeling.assign_label(probs))
        _write_json(ctx.labels_path(vid), {"volume_id": vid, "labels": labels})

    ctx.pmap(one, ctx.working_ids())
    _write_json(
        ctx.path("labels", "split.json"),
        {name: ctx.split[name] for name in SPLIT_NAMES},
    )


def _write_classifier_manifest(ctx: RunContext, manifest_path) -> None:
    base = os.path.dirname(manifest_path)
    lines = []
    for vid in ctx.train_ids:
        rel = os.path.relpath(ctx.normalized_path(vid), base).replace(os.sep, "/")
        for d, y in enumerate(ctx.slice_labels(vid)):
            lines.append(
                json.dumps(
                    {"tensor": rel, "slice_index": d, "label": int(y), "augmented": False},
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
    tmp = f"{manifest_path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path)


def _extract_cams(ctx: RunContext, cam_dir) -> None:
    out_dir = ctx.path("cams", cam_dir)
    os.makedirs(out_dir, exist_ok=True)

    def one(vid):
        volume, _ = ctx.prepared(vid)
        labels = ctx.slice_labels(vid)
        stack = np.zeros(volume.shape, dtype=np.float32)
        for d, y in enumerate(labels):
            if y == 1:
                stack[d] = _slice_cam(ctx, volume.voxels[d])
        tensorio.write_tensor(
            os.path.join(out_dir, f"{vid}.tns"), stack, spacing=volume.spacing, tensor_id=vid
        )

    ctx.pmap(one, ctx.working_ids())


def stage_cam_q0(ctx: RunContext) -> None:
    os.makedirs(ctx.path("cams", "q0"), exist_ok=True)
    manifest = ctx.path("cams", "q0", "train_manifest.jsonl")
    _write_classifier_manifest(ctx, manifest)
    ctx.backend.train_classifier(manifest, seed=ctx.config.seed)
    _extract_cams(ctx, "q0")


def _amda_dirs(ctx: RunContext, cycle: int):
    if cycle == 1:
        return ctx.path("amda"), ctx.path("amda", "slices")
    return ctx.path("amda", f"cycle{cycle}"), ctx.path("amda", f"cycle{cycle}", "slices")


def make_stage_amda(cycle: int, source_cam_dir: str):
    def stage(ctx: RunContext) -> None:
        root, slices_dir = _amda_dirs(ctx, cycle)
        os.makedirs(slices_dir, exist_ok=True)
        manifest_lines = []
        for vid in ctx.train_ids:
            volume, brain3d = ctx.prepared(vid)
            labels = ctx.slice_labels(vid)
            stack = ctx.cam_stack(source_cam_dir, vid)
            for d, y in enumerate(labels):
                cam = CamMap(values=stack[d], layer_ids=("fused",)) if y == 1 else None
                augmented = labeling.amda_augment(
                    volume.voxels[d],
                    y,
                    cam,
                    ctx.config.alpha,
                    derive_seed(ctx.config.seed, "amda", cycle, vid, d),
                    brain=brain3d[d],
                )
                name = f"{vid}_{d:03d}.tns"
                tensorio.write_tensor(
                    os.path.join(slices_dir, name), augmented.pixels, tensor_id=f"{vid}:{d}"
                )
                manifest_lines.append(
                    json.dumps(
                        {
                            "tensor": f"slices/{name}",
                            "slice_index": None,
                            "label": int(y),
                            "augmented": True,
                        },
                        sort_keys=True,
                        separators=(",", ":"),
                    )
                )
        manifest = os.path.join(root, "manifest.jsonl")
        tmp = f"{manifest}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(manifest_lines) + "\n")
        os.replace(tmp, manifest)

    return stage


def make_stage_cam_refresh(cycle: int, cam_dir: str):
    def stage(ctx: RunContext) -> None:
        root, _ = _amda_dirs(ctx, cycle)
        ctx.backend.train_classifier(os.path.join(root, "manifest.jsonl"), seed=ctx.config.seed)
        _extract_cams(ctx, cam_dir)

    return stage


def make_stage_sam_pseudo(final_cam_dir: str):
    def stage(ctx: RunContext) -> None:
        out_dir = ctx.path("pseudo", "sam")
        os.makedirs(out_dir, exist_ok=True)

        def one(vid):
            volume, brain3d = ctx.prepared(vid)
            labels = ctx.slice_labels(vid)
            stack = ctx.cam_stack(final_cam_dir, vid)
            cams = {
                d: CamMap(values=stack[d], layer_ids=("fused",))
                for d, y in enumerate(labels)
                if y == 1
            }
            label = pseudolabel.segment_from_cams(
                volume,
                brain3d,
                labels,
                cams,
                ctx.backend,
                ctx.config.alpha,
                box_padding=ctx.config.box_padding,
            )
            label.save(
                os.path.join(out_dir, f"{vid}.tns"), spacing=volume.spacing, volume_id=vid
            )

        ctx.pmap(one, ctx.working_ids())
        pool = s3f.TrainingPool(
            entries=[
                s3f.PoolEntry(
                    volume_id=vid,
                    volume_ref=f"../labels/normalized/{vid}.tns",
                    label_ref=f"sam/{vid}.tns",
                    score=None,
                    retained=True,
                )
                for vid in ctx.train_ids
            ],
            stage=s3f.STAGE_PSEUDO,
        )
        s3f.write_manifest(ctx.path("pseudo", "pool_d3.jsonl"), pool)

    return stage


def _round_pred_dir(ctx: RunContext, round_no: int, split_name: str) -> str:
    if round_no == 1:
        return ctx.path("pseudo", "round1")
    return ctx.path("models", f"round{round_no}", split_name)


def _pool_manifest_path(ctx: RunContext, round_no: int) -> str:
    # round 1 trains on the initial pseudo-label pool, round r>1 on pool_d{r+2}
    if round_no == 1:
        return ctx.path("pseudo", "pool_d3.jsonl")
    return ctx.path("pseudo", f"pool_d{round_no + 2}.jsonl")


def _predict_split(ctx: RunContext, out_dir, vids) -> None:
    os.makedirs(out_dir, exist_ok=True)

    def one(vid):
        volume, _ = ctx.prepared(vid)
        pred = ctx.backend.predict_volume(volume.voxels, volume.spacing)
        tensorio.write_tensor(
            os.path.join(out_dir, f"{vid}.tns"), pred, spacing=volume.spacing, tensor_id=vid
        )

    ctx.pmap(one, vids)


def _val_dsc_against_pseudo(ctx: RunContext, pred_dir) -> float | None:
    if not ctx.val_ids:
        return None
    scores = []
    for vid in ctx.val_ids:
        pred = tensorio.read_tensor(os.path.join(pred_dir, f"{vid}.tns")).array
        ref = tensorio.read_tensor(ctx.path("pseudo", "sam", f"{vid}.tns")).array
        scores.append(metrics.dsc(pred, ref))
    return float(np.mean(scores))


def make_stage_train(round_no: int, total_rounds: int):
    def stage(ctx: RunContext) -> None:
        manifest = _pool_manifest_path(ctx, round_no)
        ctx.backend.train_segmenter(manifest, seed=ctx.config.seed)
        needs_train_preds = round_no == 1 or round_no < total_rounds
        if round_no == 1:
            _predict_split(ctx, _round_pred_dir(ctx, 1, "train"), ctx.working_ids())
        else:
            if needs_train_preds:
                _predict_split(ctx, _round_pred_dir(ctx, round_no, "train"), ctx.train_ids)
            _predict_split(ctx, _round_pred_dir(ctx, round_no, "val"), ctx.val_ids)
        os.makedirs(ctx.path("models"), exist_ok=True)
        _write_json(
            ctx.path("models", f"round{round_no}.json"),
            {"pool": ctx.rel(manifest), "pool_digest": _sha256_file(manifest)},
        )
        if round_no == total_rounds:
            rounds_dsc = {}
            for r in range(1, total_rounds + 1):
                pred_dir = _round_pred_dir(ctx, r, "val") if r > 1 else _round_pred_dir(ctx, 1, "train")
                rounds_dsc[str(r)] = _val_dsc_against_pseudo(ctx, pred_dir)
            if all(v is None for v in rounds_dsc.values()):
                selected = total_rounds  # no validation volumes: keep the final round
            else:
                selected = max(
                    (r for r in range(1, total_rounds + 1)),
                    key=lambda r: (rounds_dsc[str(r)] is not None, rounds_dsc[str(r)] or 0.0, r),
                )
            _write_json(
                ctx.path("models", "selection.json"),
                {
                    "val_dsc_by_round": rounds_dsc,
                    "selected_round": selected,
                    "selected_pool": ctx.rel(_pool_manifest_path(ctx, selected)),
                },
            )

    return stage


def make_stage_s3f(round_no: int):
    """Score round (round_no - 1) predictions by re-prompted agreement and
    filter the pool for round round_no."""

    def stage(ctx: RunContext) -> None:
        source_dir = _round_pred_dir(ctx, round_no - 1, "train")
        reseg_dir = (
            ctx.path("pseudo", "reseg")
            if round_no == 2
            else ctx.path("pseudo", f"reseg_r{round_no}")
        )
        os.makedirs(reseg_dir, exist_ok=True)

        def one(vid):
            volume, _ = ctx.prepared(vid)
            pred = as_mask(
                tensorio.read_tensor(os.path.join(source_dir, f"{vid}.tns")).array
            )
            reseg = pseudolabel.resegment_via_prompts(volume, pred, ctx.backend)
            reseg.save(
                os.path.join(reseg_dir, f"{vid}.tns"), spacing=volume.spacing, volume_id=vid
            )
            return s3f.score(pred, reseg.mask)

        scores = ctx.pmap(one, ctx.train_ids)
        pseudo_dir = ctx.path("pseudo")
        entries = []
        for vid, value in zip(ctx.train_ids, scores):
            label_path = os.path.join(source_dir, f"{vid}.tns")
            entries.append(
                s3f.PoolEntry(
                    volume_id=vid,
                    volume_ref=f"../labels/normalized/{vid}.tns",
                    label_ref=os.path.relpath(label_path, pseudo_dir).replace(os.sep, "/"),
                    score=value,
                    retained=True,
                )
            )
        pool = s3f.TrainingPool(entries=entries, stage=s3f.STAGE_PSEUDO)
        filtered = s3f.filter_pool(pool, ctx.config.beta)
        s3f.write_manifest(_pool_manifest_path(ctx, round_no), filtered)

    return stage


def stage_eval(ctx: RunContext) -> None:
    selection_path = ctx.path("models", "selection.json")
    if not os.path.exists(selection_path):
        raise DependencyError("eval requires models/selection.json from the final training stage")
    selection = _read_json(selection_path)
    pool_path = ctx.path(*selection["selected_pool"].split("/"))
    ctx.backend.train_segmenter(pool_path, seed=ctx.config.seed)
    final_dir = ctx.path("models", "final")
    os.makedirs(final_dir, exist_ok=True)
    preds = {}
    gts = {}
    spacings = {}
    for vid in ctx.test_ids:
        gt_path = ctx.path("input", "gt", f"{vid}.tns")
        if not os.path.exists(gt_path):
            raise DependencyError(f"eval requires ground truth input/gt/{vid}.tns")
        record = tensorio.read_tensor(ctx.input_volume(vid))
        volume = Volume(record.array, spacing=record.spacing or ctx.config.spacing_default, id=vid)
        prep = prepare(volume)
        pred = ctx.backend.predict_volume(prep.volume.voxels, prep.volume.spacing)
        tensorio.write_tensor(
            os.path.join(final_dir, f"{vid}.tns"), pred, spacing=volume.spacing, tensor_id=vid
        )
        preds[vid] = pred
        gts[vid] = as_mask(tensorio.read_tensor(gt_path).array)
        spacings[vid] = volume.spacing
    report = metrics.evaluate(preds, gts, spacing=spacings, penalty=ctx.config.hd95_penalty)
    os.makedirs(ctx.path("reports"), exist_ok=True)
    _write_json(ctx.path("reports", "report.json"), report.to_json_obj())
    if ctx.config.report_format in ("table", "both"):
        with open(ctx.path("reports", "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(metrics.report_table(report))


# ---------------------------------------------------------------------------
# stage wiring


@dataclass(frozen=True)
class StageSpec:
    name: str
    config_keys: tuple
    run: object
    inputs: object  # callable(ctx) -> list of workdir-relative paths
    outputs: object


def _label_files(ctx, vids):
    out = []
    for vid in vids:
        out += [
            f"labels/{vid}.json",
            f"labels/normalized/{vid}.tns",
            f"labels/brain/{vid}.tns",
        ]
    return out


def build_stages(config: PipelineConfig) -> list[StageSpec]:
    cycles = config.amda_cycles
    rounds = config.rounds
    final_cam = f"q{cycles}"
    stages = [
        StageSpec(
            name="label",
            config_keys=("text_prompts", "split", "seed", "backend"),
            run=stage_label,
            inputs=lambda ctx: [f"input/volumes/{vid}.tns" for vid in ctx.working_ids()],
            outputs=lambda ctx: ["labels/split.json"] + _label_files(ctx, ctx.working_ids()),
        ),
        StageSpec(
            name="cam_q0",
            config_keys=("backend", "cam_formula", "seed", "region_grow_tau"),
            run=stage_cam_q0,
            inputs=lambda ctx: ["labels/split.json"] + _label_files(ctx, ctx.working_ids()),
            outputs=lambda ctx: ["cams/q0/train_manifest.jsonl"]
            + [f"cams/q0/{vid}.tns" for vid in ctx.working_ids()],
        ),
    ]
    for cycle in range(1, cycles + 1):
        source_cam = f"q{cycle - 1}"
        target_cam = f"q{cycle}"
        amda_name = "amda" if cycle == 1 else f"amda{cycle}"
        amda_rel = "amda" if cycle == 1 else f"amda/cycle{cycle}"
        stages.append(
            StageSpec(
                name=amda_name,
                config_keys=("alpha", "seed"),
                run=make_stage_amda(cycle, source_cam),
                inputs=lambda ctx, sc=source_cam: _label_files(ctx, ctx.train_ids)
                + [f"cams/{sc}/{vid}.tns" for vid in ctx.train_ids],
                outputs=lambda ctx, rel=amda_rel: [f"{rel}/manifest.jsonl", f"{rel}/slices"],
            )
        )
        stages.append(
            StageSpec(
                name=f"cam_{target_cam}",
                config_keys=("backend", "cam_formula", "seed", "region_grow_tau"),
                run=make_stage_cam_refresh(cycle, target_cam),
                inputs=lambda ctx, rel=amda_rel: [f"{rel}/manifest.jsonl", f"{rel}/slices"]
                + _label_files(ctx, ctx.working_ids()),
                outputs=lambda ctx, tc=target_cam: [
                    f"cams/{tc}/{vid}.tns" for vid in ctx.working_ids()
                ],
            )
        )
    stages.append(
        StageSpec(
            name="sam_pseudo",
            config_keys=("alpha", "box_padding", "backend", "region_grow_tau", "seed"),
            run=make_stage_sam_pseudo(final_cam),
            inputs=lambda ctx, fc=final_cam: _label_files(ctx, ctx.working_ids())
            + [f"cams/{fc}/{vid}.tns" for vid in ctx.working_ids()],
            outputs=lambda ctx: ["pseudo/pool_d3.jsonl"]
            + [f"pseudo/sam/{vid}.tns" for vid in ctx.working_ids()]
            + [f"pseudo/sam/{vid}.tns.origins.json" for vid in ctx.working_ids()],
        )
    )
    stages.append(
        StageSpec(
            name="train_round1",
            config_keys=("backend", "seed", "region_grow_tau"),
            run=make_stage_train(1, rounds),
            inputs=lambda ctx: ["pseudo/pool_d3.jsonl"]
            + [f"pseudo/sam/{vid}.tns" for vid in ctx.train_ids]
            + _label_files(ctx, ctx.working_ids()),
            outputs=lambda ctx: [f"pseudo/round1/{vid}.tns" for vid in ctx.working_ids()]
            + ["models/round1.json"]
            + (["models/selection.json"] if rounds == 1 else []),
        )
    )
    for r in range(2, rounds + 1):
        s3f_name = "s3f" if r == 2 else f"s3f_r{r}"
        reseg_rel = "pseudo/reseg" if r == 2 else f"pseudo/reseg_r{r}"
        pool_rel = f"pseudo/pool_d{r + 2}.jsonl"

        def s3f_inputs(ctx, rr=r):
            src = _round_pred_dir(ctx, rr - 1, "train")
            return [ctx.rel(os.path.join(src, f"{vid}.tns")) for vid in ctx.train_ids] + _label_files(
                ctx, ctx.train_ids
            )

        stages.append(
            StageSpec(
                name=s3f_name,
                config_keys=("beta", "backend", "region_grow_tau", "seed"),
                run=make_stage_s3f(r),
                inputs=s3f_inputs,
                outputs=lambda ctx, rel=reseg_rel, pool=pool_rel: [pool, rel],
            )
        )

        def train_inputs(ctx, rr=r, pool=pool_rel):
            src = _round_pred_dir(ctx, rr - 1, "train")
            paths = [pool] + [
                ctx.rel(os.path.join(src, f"{vid}.tns")) for vid in ctx.train_ids
            ]
            paths += _label_files(ctx, ctx.working_ids())
            if rr == 2:
                paths += [f"pseudo/sam/{vid}.tns" for vid in ctx.val_ids]
            paths += [f"pseudo/round1/{vid}.tns" for vid in ctx.val_ids]
            return paths

        def train_outputs(ctx, rr=r, total=rounds):
            out = [f"models/round{rr}.json"]
            out += [ctx.rel(os.path.join(_round_pred_dir(ctx, rr, "val"), f"{vid}.tns"))
                    for vid in ctx.val_ids]
            if rr < total:
                out += [ctx.rel(os.path.join(_round_pred_dir(ctx, rr, "train"), f"{vid}.tns"))
                        for vid in ctx.train_ids]
            if rr == total:
                out.append("models/selection.json")
            return out

        stages.append(
            StageSpec(
                name=f"train_round{r}",
                config_keys=("backend", "seed", "region_grow_tau"),
                run=make_stage_train(r, rounds),
                inputs=train_inputs,
                outputs=train_outputs,
            )
        )
    stages.append(
        StageSpec(
            name="eval",
            config_keys=(
                "backend",
                "seed",
                "region_grow_tau",
                "hd95_penalty",
                "spacing_default",
                "report_format",
            ),
            run=stage_eval,
            inputs=lambda ctx: ["models/selection.json"]
            + [ctx.rel(_pool_manifest_path(ctx, r)) for r in range(1, rounds + 1)]
            + [f"input/volumes/{vid}.tns" for vid in ctx.test_ids]
            + [f"input/gt/{vid}.tns" for vid in ctx.test_ids]
            + _label_files(ctx, ctx.train_ids),
            outputs=lambda ctx: ["reports/report.json"]
            + [f"models/final/{vid}.tns" for vid in ctx.test_ids]
            + (["reports/report.txt"] if config.report_format in ("table", "both") else []),
        )
    )
    return stages


# ---------------------------------------------------------------------------
# digests and the runner


def _expand_files(workdir, relpaths):
    files = []
    for rel in relpaths:
        path = os.path.join(workdir, rel)
        if os.path.isdir(path):
            for root, _, names in os.walk(path):
                for name in sorted(names):
                    files.append(
                        os.path.relpath(os.path.join(root, name), workdir).replace(os.sep, "/")
                    )
        else:
            files.append(rel.replace(os.sep, "/"))
    return sorted(set(files))


def digest_paths(workdir, relpaths) -> dict:
    out = {}
    for rel in _expand_files(workdir, relpaths):
        path = os.path.join(workdir, rel)
        out[rel] = _sha256_file(path) if os.path.exists(path) else "missing"
    return out


def _config_subset(config: PipelineConfig, keys) -> dict:
    obj = config.to_json_obj()
    return {k: obj[k] for k in sorted(keys)}


@dataclass
class RunResult:
    ledger: Ledger
    executed: list[str]
    skipped: list[str]
    stage_names: list[str]


def _outputs_intact(workdir, entry) -> bool:
    for rel, digest in entry.get("outputs", {}).items():
        path = os.path.join(workdir, rel)
        if not os.path.exists(path) or _sha256_file(path) != digest:
            return False
    return True


def run(config: PipelineConfig, stages=None, force: bool = False,
        backend: Backend | None = None) -> RunResult:
    """Execute the pipeline (or a subset of stages) against config.workdir."""
    config.validate()
    workdir = config.workdir
    input_dir = os.path.join(workdir, "input", "volumes")
    if not os.path.isdir(input_dir):
        raise DependencyError(f"no input volumes at {input_dir}")
    ids = sorted(
        os.path.splitext(name)[0]
        for name in os.listdir(input_dir)
        if name.endswith(".tns")
    )
    if not ids:
        raise DependencyError(f"no input volumes at {input_dir}")
    train, val, test = split_dataset(ids, config.split, config.seed)
    specs = build_stages(config)
    names = [s.name for s in specs]
    if stages is None:
        requested = list(names)
    else:
        requested = list(stages)
        unknown = [s for s in requested if s not in names]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; pipeline stages are {names}")

    owns_backend = backend is None
    backend = backend or make_backend(config)
    ledger = Ledger.load(os.path.join(workdir, "ledger.json"))
    ctx = RunContext(
        config=config,
        workdir=workdir,
        ids=ids,
        split={"train": train, "val": val, "test": test},
        backend=backend,
    )
    executed, skipped = [], []
    completed_before = set()
    try:
        for spec in specs:
            entry = ledger.stages.get(spec.name)
            if spec.name not in requested:
                if entry and entry.get("status") == "completed" and _outputs_intact(workdir, entry):
                    completed_before.add(spec.name)
                continue
            for prior in specs[: specs.index(spec)]:
                if prior.name in completed_before or prior.name in executed or prior.name in skipped:
                    continue
                raise DependencyError(
                    f"stage {spec.name!r} requires stage {prior.name!r} to have run first"
                )
            inputs = digest_paths(workdir, spec.inputs(ctx))
            missing = [rel for rel, d in inputs.items() if d == "missing"]
            if missing:
                raise DependencyError(
                    f"stage {spec.name!r} is missing upstream artifacts: {missing[:5]}"
                )
            config_subset = _config_subset(config, spec.config_keys)
            if (
                not force
                and entry
                and entry.get("status") == "completed"
                and entry.get("inputs") == inputs
                and entry.get("config") == config_subset
                and _outputs_intact(workdir, entry)
            ):
                skipped.append(spec.name)
                continue
            started = time.perf_counter()
            spec.run(ctx)
            duration = time.perf_counter() - started
            ledger.stages[spec.name] = {
                "name": spec.name,
                "status": "completed",
                "inputs": inputs,
                "config": config_subset,
                "outputs": digest_paths(workdir, spec.outputs(ctx)),
                "duration_s": round(duration, 6),
            }
            ledger.save()
            executed.append(spec.name)
    finally:
        if owns_backend:
            backend.close()
    return RunResult(ledger=ledger, executed=executed, skipped=skipped, stage_names=names)


# ---------------------------------------------------------------------------
# sweeps


def _copy_tree(src, dst) -> None:
    os.makedirs(dst, exist_ok=True)
    for root, dirs, files in os.walk(src):
        rel = os.path.relpath(root, src)
        target = os.path.join(dst, rel) if rel != "." else dst
        os.makedirs(target, exist_ok=True)
        for name in files:
            shutil.copy2(os.path.join(root, name), os.path.join(target, name))


def sweep(config: PipelineConfig, param: str, values, force: bool = False) -> list[dict]:
    """Run the pipeline suffix that depends on ``param`` once per value.

    The stage prefix that does not read ``param`` is executed once in the
    base workdir and reused (by digest match) in every per-value run.
    """
    config.validate()
    if param not in ("alpha", "beta"):
        raise ConfigError(f"sweep parameter must be alpha or beta, got {param!r}")
    values = [float(v) for v in values]
    for v in values:
        probe = replace(config, **{param: v})
        probe.validate()
    specs = build_stages(config)
    suffix_idx = next(
        (i for i, s in enumerate(specs) if param in s.config_keys), len(specs)
    )
    prefix = [s.name for s in specs[:suffix_idx]]
    if prefix:
        run(config, stages=prefix, force=force)
    rows = []
    for value in values:
        tag = f"{value:g}"
        sub_dir = os.path.join(config.workdir, "sweeps", f"{param}_{tag}")
        os.makedirs(sub_dir, exist_ok=True)
        _copy_tree(os.path.join(config.workdir, "input"), os.path.join(sub_dir, "input"))
        base_ledger = Ledger.load(os.path.join(config.workdir, "ledger.json"))
        sub_ledger = Ledger(path=os.path.join(sub_dir, "ledger.json"))
        for name in prefix:
            entry = base_ledger.stages.get(name)
            if not entry:
                continue
            sub_ledger.stages[name] = entry
            for rel in entry.get("outputs", {}):
                src = os.path.join(config.workdir, rel)
                dst = os.path.join(sub_dir, rel)
                os.makedirs(os.path.dirname(dst), exist_ok=True)
                shutil.copy2(src, dst)
        sub_ledger.save()
        sub_config = replace(config, workdir=sub_dir, **{param: value})
        run(sub_config, force=False)
        report = _read_json(os.path.join(sub_dir, "reports", "report.json"))
        overall = report["aggregate"]["overall"]
        rows.append(
            {
                param: value,
                "mean_dsc": overall["dsc"]["mean"],
                "std_dsc": overall["dsc"]["std"],
                "mean_hd95_mm": overall["hd95_mm"]["mean"],
                "std_hd95_mm": overall["hd95_mm"]["std"],
            }
        )
    os.makedirs(os.path.join(config.workdir, "reports"), exist_ok=True)
    csv_path = os.path.join(config.workdir, "reports", f"sweep_{param}.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=[param, "mean_dsc", "std_dsc", "mean_hd95_mm", "std_hd95_mm"]
        )
        writer.writeheader()
        writer.writerows(rows)
    _write_json(os.path.join(config.workdir, "reports", f"sweep_{param}.json"), rows)
    return rows
