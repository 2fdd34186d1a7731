"""
voxsynth pipeline: the steps behind each command-line subcommand.

``Pipeline`` owns one resolved RunConfig and runs phantom generation, training,
synthesis, evaluation and classification against files on disk. Every step
returns a result dict and writes the resolved configuration next to its output.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

import nn_ops
import patch_baseline
import unet
from checkpoint import checkpoint_kind
from classify import kfold_split, run_classification_experiment
from dataset import PairedDataset, load_dataset, load_mask_dir, load_volume_dir, select, write_dataset
from errors import ConfigError, DataError, ShapeError
from metrics import DEFAULT_ROI_NAMES, MetricsReport, RoiRecord, comparison_table, evaluate_subjects, roi_metrics
from phantom import PhantomSpec, gen_dataset
from run_config import RunConfig, coerce, parse_kv, write_sidecar
from volume_io import Volume, export_slice_pgm, load_volume, normalize_minmax, save_volume

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
CHECKPOINT_NAME = {"unet": "unet.unck", "patch": "patch.unck"}
LOG_NAME = "train_log.csv"


class Pipeline:
    """Runs voxsynth steps under one resolved configuration."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.workers = config.workers()
        nn_ops.set_strict(config.strict)
        logger.info("profile %s, seed %d, %d worker(s)%s", config.profile, config.seed, self.workers,
                    ", strict kernels" if config.strict else "")

    def _map(self, fn, items: Sequence) -> List:
        """Apply ``fn`` to ``items``, in a thread pool when allowed; results keep input order."""
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def _plan(self, dataset: PairedDataset, folds: Optional[int] = None, fold_seed: Optional[int] = None):
        return kfold_split(len(dataset), folds or self.config.folds, dataset.labels(),
                           self.config.fold_seed if fold_seed is None else fold_seed)

    # phantom

    def phantom(self, out: PathLike) -> Dict[str, Any]:
        c = self.config
        spec = PhantomSpec(c.size, c.n, c.balance, c.seed, c.mode, c.amplitude).validate()
        dataset = gen_dataset(spec, self.workers)
        manifest = write_dataset(dataset, out)
        write_sidecar(c, out)
        labels = dataset.labels()
        return {"subjects": len(dataset), "class_1": sum(labels), "class_0": len(labels) - sum(labels),
                "size": spec.size, "mode": spec.mode, "manifest": str(manifest)}

    # train

    def train(self, method: str, data: PathLike, out: PathLike, resume: bool = False) -> Dict[str, Any]:
        if method not in CHECKPOINT_NAME:
            raise ConfigError(f"method must be unet or patch, got {method!r}")
        dataset = load_dataset(data)
        plan = self._plan(dataset)
        out = Path(out)
        write_sidecar(self.config, out)
        results = {}
        for round_index in self.config.fold_rounds():
            test, val, train = plan.roles(round_index)
            round_dir = out / f"fold{round_index}"
            if method == "unet":
                results[round_index] = self._train_unet(dataset, train, val, round_index, round_dir, resume)
            else:
                results[round_index] = self._train_patch(dataset, train, val, round_index, round_dir, resume)
            logger.info("fold %d: %d train, %d validation, %d test subjects",
                        round_index, len(train), len(val), len(test))
        return {"method": method, "rounds": results}

    def _provenance(self, round_index: int) -> str:
        values = parse_kv(self.config.to_text())
        values["fold"] = str(round_index)
        return "\n".join(f"{k}={v}" for k, v in sorted(values.items()))

    def _open_log(self, path: Path, resumed: bool, method: str, round_index: int):
        path.parent.mkdir(parents=True, exist_ok=True)
        handle = path.open("a" if resumed else "w", encoding="utf-8")
        if not resumed:
            handle.write(f"# voxsynth train method={method} fold={round_index}\n")
        return handle

    def _train_unet(self, dataset: PairedDataset, train: List[int], val: List[int], round_index: int,
                    round_dir: Path, resume: bool) -> Dict[str, Any]:
        c = self.config
        net_config = unet.UNetConfig(c.depth, c.base_channels, 1, 1, c.bn_momentum).validate()
        for pair in dataset.pairs(train[:1]):
            net_config.check_input((1, 1) + pair[0].dims)
        path = round_dir / CHECKPOINT_NAME["unet"]
        resumed = resume and path.is_file()
        if resumed:
            model = unet.load_checkpoint(path, net_config)
            logger.info("resuming U-Net fold %d from step %d", round_index, model.step)
        else:
            model = unet.build_unet(net_config, c.seed + round_index, np.float32, c.lr, c.beta1, c.beta2, c.adam_eps)
        model.provenance = self._provenance(round_index)

        rng = np.random.default_rng(c.seed + 1000 + round_index)
        steps_per_epoch = math.ceil(len(train) / c.batch_size)
        start_epoch = model.step // steps_per_epoch
        for _ in range(start_epoch):
            rng.permutation(len(train))

        with self._open_log(round_dir / LOG_NAME, resumed, "unet", round_index) as log:
            def record(entry: unet.EpochRecord):
                log.write(entry.to_line() + "\n")
                log.flush()
                unet.save_checkpoint(model, path)

            history = unet.train_unet_round(model, dataset.pairs(train), dataset.pairs(val), c.epochs,
                                            c.batch_size, rng, c.loss, start_epoch, record)
        if not history:
            unet.save_checkpoint(model, path)
        return {"checkpoint": str(path), "step": model.step, "epochs_run": len(history),
                "final_train_loss": history[-1].train_loss if history else None}

    def _train_patch(self, dataset: PairedDataset, train: List[int], val: List[int], round_index: int,
                     round_dir: Path, resume: bool) -> Dict[str, Any]:
        c = self.config
        path = round_dir / CHECKPOINT_NAME["patch"]
        resumed = resume and path.is_file()
        if resumed:
            model = patch_baseline.load_checkpoint(path)
            logger.info("resuming patch model fold %d from step %d", round_index, model.step)
        else:
            model = patch_baseline.build_patch_cnn(c.seed + round_index, np.float32, c.lr, c.beta1,
                                                   c.beta2, c.adam_eps)
        model.provenance = self._provenance(round_index)

        train_pairs, val_pairs = dataset.pairs(train), dataset.pairs(val)
        rng = np.random.default_rng(c.seed + 1000 + round_index)
        steps_per_epoch = math.ceil(len(train) * c.patch_samples / c.patch_batch)
        start_epoch = model.step // steps_per_epoch
        for _ in range(start_epoch):
            patch_baseline.sample_epoch(train_pairs, c.patch_samples, rng)

        history = []
        with self._open_log(round_dir / LOG_NAME, resumed, "patch", round_index) as log:
            for epoch in range(start_epoch, c.epochs):
                train_loss = patch_baseline.train_patch_epoch(model, train_pairs, c.patch_samples,
                                                              c.patch_batch, rng, c.loss)
                val_loss = patch_baseline.evaluate_patch_loss(model, val_pairs, patch_baseline.MAX_STRIDE, c.loss)
                entry = unet.EpochRecord(epoch, model.step, train_loss, val_loss)
                log.write(entry.to_line() + "\n")
                log.flush()
                patch_baseline.save_checkpoint(model, path)
                history.append(entry)
        if not history:
            patch_baseline.save_checkpoint(model, path)
        return {"checkpoint": str(path), "step": model.step, "epochs_run": len(history),
                "final_train_loss": history[-1].train_loss if history else None}

    # synthesize

    def _load_model(self, path: PathLike):
        kind = checkpoint_kind(path)
        if kind == "unet":
            return unet.load_checkpoint(path)
        if kind == "patch":
            return patch_baseline.load_checkpoint(path)
        raise ConfigError(f"{path}: unknown checkpoint kind {kind!r}")

    def _predict(self, model, volume: Volume):
        """(prediction, coverage mask or None)."""
        if isinstance(model, unet.UNetModel):
            return model.predict(volume), None
        return patch_baseline.reconstruct(model, volume, self.config.patch_stride)

    def _route(self, models: List, dataset: PairedDataset) -> List[int]:
        """Index of the model whose test fold holds each subject."""
        if len(models) == 1:
            return [0] * len(dataset)
        owner: Dict[int, int] = {}
        for model_index, model in enumerate(models):
            values = parse_kv(model.provenance)
            if "fold" not in values or values["fold"] == "all":
                raise ConfigError("several checkpoints given but one does not record its fold")
            run = coerce({k: values[k] for k in ("fold", "folds", "fold_seed") if k in values})
            plan = self._plan(dataset, run.get("folds"), run.get("fold_seed"))
            for subject_index in plan.members(int(run["fold"])):
                owner[subject_index] = model_index
        missing = [dataset.subjects[i].subject_id for i in range(len(dataset)) if i not in owner]
        if missing:
            raise DataError(f"no checkpoint has {', '.join(missing[:5])} in its test fold")
        return [owner[i] for i in range(len(dataset))]

    def synthesize(self, checkpoints: Sequence[PathLike], out: PathLike, data: Optional[PathLike] = None,
                   inputs: Sequence[PathLike] = (), slices: bool = False) -> Dict[str, Any]:
        if not checkpoints:
            raise ConfigError("synthesize needs at least one checkpoint")
        if data is None and not inputs:
            raise ConfigError("synthesize needs --data or --input")
        models = [self._load_model(p) for p in checkpoints]
        out = Path(out)

        jobs = []  # (subject id, input volume, target volume or None, model)
        if data is not None:
            dataset = load_dataset(data)
            for subject, owner in zip(dataset.subjects, self._route(models, dataset)):
                jobs.append((subject.subject_id, subject.input, subject.target, models[owner]))
        for path in inputs:
            path = Path(path)
            jobs.append((path.name.split(".")[0], load_volume(path), None, models[0]))

        def run(job):
            subject_id, source, target, model = job
            prediction, mask = self._predict(model, source)
            save_volume(prediction, out / f"{subject_id}.rvol", mask)
            if slices:
                self._export_slices(out / "slices", subject_id, source, prediction, target)
            return subject_id

        written = self._map(run, jobs)
        write_sidecar(self.config, out)
        return {"predictions": len(written), "out": str(out), "slices": slices}

    @staticmethod
    def _export_slices(directory: Path, subject_id: str, source: Volume, prediction: Volume,
                       target: Optional[Volume]) -> None:
        """Middle axial (axis 2) and sagittal (axis 0) slices of input, prediction and target."""
        views = {"axial": 2, "sagittal": 0}
        images = {"input": normalize_minmax(source), "pred": prediction}
        if target is not None:
            images["target"] = target
        for view, axis in views.items():
            index = source.dims[axis] // 2
            for name, volume in images.items():
                export_slice_pgm(volume, axis, index, directory / f"{subject_id}_{name}_{view}.pgm")

    # evaluate

    def evaluate(self, predictions: Mapping[str, PathLike], data: PathLike, out: PathLike,
                 mask_dir: Optional[PathLike] = None, labels: Optional[PathLike] = None) -> Dict[str, Any]:
        if not predictions:
            raise ConfigError("evaluate needs at least one --pred directory")
        c = self.config
        dataset = load_dataset(data)
        targets = {s.subject_id: s.target for s in dataset.subjects}
        label_volume = load_volume(labels).data.astype(np.int64) if labels is not None else None

        loaded = {method: load_volume_dir(directory) for method, directory in predictions.items()}
        id_sets = {method: sorted(volumes) for method, volumes in loaded.items()}
        reference = next(iter(id_sets.values()))
        if not reference:
            raise DataError("no predictions found")
        for method, ids in id_sets.items():
            if ids != reference:
                raise DataError(f"{method} predicts a different subject set than {next(iter(id_sets))}")
        unknown = [i for i in reference if i not in targets]
        if unknown:
            raise DataError(f"predictions for subjects not in the dataset: {', '.join(unknown[:5])}")

        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        masks = self._shared_support(predictions, reference, mask_dir)
        reports = []
        for method, volumes in loaded.items():
            items = [(i, volumes[i], targets[i], masks.get(i)) for i in reference]
            report = evaluate_subjects(method, items, c.max_intensity, c.ssim_c1, c.ssim_c2, self.workers)
            if label_volume is not None:
                report.roi_table = self._roi_table(items, label_volume)
                (out / f"{method}_roi.csv").write_text(report.roi_csv(), encoding="utf-8")
            (out / f"{method}_metrics.csv").write_text(report.to_csv(), encoding="utf-8")
            (out / f"{method}_summary.txt").write_text(report.summary(), encoding="utf-8")
            reports.append(report)
        table = comparison_table(reports)
        (out / "comparison.csv").write_text(table, encoding="utf-8")
        write_sidecar(c, out)
        return {"subjects": len(reference), "methods": [r.method for r in reports], "table": table}

    def _shared_support(self, predictions: Mapping[str, PathLike], subjects: Sequence[str],
                        mask_dir: Optional[PathLike]) -> Dict[str, np.ndarray]:
        """
        One mask per subject, applied to every method.

        ``--mask-dir`` wins when given. Otherwise the coverage masks found next to
        any method's predictions are intersected, so a full-volume method is scored
        on the same voxels as a method that cannot reach the border.
        """
        if mask_dir is not None:
            masks = load_mask_dir(mask_dir)
            select(masks, subjects, "mask directory")
            return {i: masks[i] for i in subjects}
        shared: Dict[str, np.ndarray] = {}
        for method, directory in predictions.items():
            for subject, mask in load_mask_dir(directory).items():
                if subject in shared:
                    if shared[subject].shape != mask.shape:
                        raise ShapeError(f"{method} coverage mask for {subject} has shape {mask.shape}, "
                                         f"expected {shared[subject].shape}")
                    shared[subject] = shared[subject] & mask
                else:
                    shared[subject] = mask
        for subject, mask in shared.items():
            if not mask.any():
                raise DataError(f"coverage masks for {subject} share no voxels")
        if shared:
            logger.info("scoring all methods on the shared coverage of %d subject(s)", len(shared))
        return shared

    def _roi_table(self, items, label_volume: np.ndarray) -> List[RoiRecord]:
        """Per-ROI MAE and PSNR averaged over subjects; infinite PSNR values are left out."""
        roi_ids = [int(v) for v in np.unique(label_volume) if v != 0]
        if not roi_ids:
            raise DataError("label volume has no non-zero regions")
        per_subject = [roi_metrics(pred, target, label_volume, roi_ids, DEFAULT_ROI_NAMES, self.config.max_intensity)
                       for _, pred, target, _ in items]
        table = []
        for position, roi_id in enumerate(roi_ids):
            rows = [table_[position] for table_ in per_subject]
            finite_psnr = [r.psnr for r in rows if math.isfinite(r.psnr)]
            table.append(RoiRecord(roi_id, rows[0].name, rows[0].voxels, float(np.mean([r.mae for r in rows])),
                                   float(np.mean(finite_psnr)) if finite_psnr else math.inf))
        return table

    # classify

    def classify(self, data: PathLike, synth: Mapping[str, PathLike], out: PathLike) -> Dict[str, Any]:
        if not synth:
            raise ConfigError("classify needs at least one --synth name=DIR source")
        c = self.config
        dataset = load_dataset(data)
        ids = dataset.ids()
        for subject in dataset.subjects:
            if any(d % c.feature_grid for d in subject.input.dims):
                raise ShapeError(f"{subject.subject_id}: dims {subject.input.dims} not divisible by "
                                 f"feature grid {c.feature_grid}")
        synth_volumes = {name: select(load_volume_dir(directory), ids, f"synthesized source {name!r}")
                         for name, directory in synth.items()}
        report = run_classification_experiment(
            dataset.labels(), [s.input for s in dataset.subjects], [s.target for s in dataset.subjects],
            synth_volumes, self._plan(dataset), c.feature_grid, c.lambda_grid, self.workers)
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        table = report.to_csv()
        (out / "classification.csv").write_text(table, encoding="utf-8")
        (out / "classification_rounds.csv").write_text(report.rounds_csv(), encoding="utf-8")
        write_sidecar(c, out)
        return {"subjects": len(ids), "sources": list(synth), "table": table}
