"""Stage wiring shared by the CLI, the ablation runner and the acceptance tests."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from filelock import FileLock, Timeout

from . import __version__
from .captioning import (
    ENDPOINT_ENV,
    PROMPT_TEMPLATES,
    MLLMClient,
    TemplateCaptioner,
    expand,
)
from .config import ABLATION_MASKS, CaptionerSection, CorpusSection, ExperimentConfig
from .dataset_io import (
    DatasetManifest,
    DistilledDataset,
    generate_toy_corpus,
    load_manifest,
    to_uint8,
)
from .diffusion import EdgeDiffusion, load_checkpoint, save_checkpoint
from .distiller import (
    SynthesisRequest,
    TrainingLog,
    align_heads,
    baseline_pretrained_synthesize,
    finetune,
    pretrain,
    synthesize,
)
from .errors import ConfigurationError, EdgeDistillError, ValidationError
from .retrieval import (
    DualEncoder,
    EvalConfig,
    EvaluationReport,
    evaluate_pipeline,
    train_eval_model,
)
from .text import Vocabulary
from .toy import ToyCorpusSpec

log = logging.getLogger(__name__)

RUN_DESCRIPTOR = "run.json"
LOCK_NAME = ".lock"

# ablation mask -> distiller loss mask (None: the pretrained model, untouched)
MASK_TO_LOSS = {
    "mse_only": None,
    "plus_contrastive": "contrastive",
    "plus_contrastive_diversity": "contrastive_diversity",
    "edge_plus_caption_synthesis": "contrastive_diversity",
}
RECALL_COLUMNS = ("IR@1", "IR@5", "IR@10", "TR@1", "TR@5", "TR@10")


# ---------------------------------------------------------------------------
# run directory

class RunDirectory:
    """A run's output directory, held under an exclusive lock while a command runs."""

    def __init__(self, path: str | os.PathLike, command: str):
        self.path = Path(path)
        self.command = command
        self._lock: FileLock | None = None
        self.artifacts: dict[str, str] = {}
        self.started = 0.0

    def __enter__(self) -> "RunDirectory":
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.path / LOCK_NAME), timeout=0)
        try:
            self._lock.acquire()
        except Timeout as exc:
            raise EdgeDistillError(f"run directory {self.path} is locked by another command") from exc
        self.started = time.time()
        return self

    def __exit__(self, *exc):
        if self._lock is not None:
            self._lock.release()
        return False

    def record(self, name: str, path: Path) -> Path:
        self.artifacts[name] = str(Path(path).relative_to(self.path)) if Path(path).is_relative_to(self.path) else str(path)
        return path

    def write_descriptor(self, config: ExperimentConfig, argv: Sequence[str] = (), extra: dict | None = None) -> Path:
        """Merge this command's entry into ``run.json``."""
        path = self.path / RUN_DESCRIPTOR
        desc = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {"commands": {}}
        desc["version"] = __version__
        desc["commands"][self.command] = {
            "argv": list(argv),
            "seed": config.run.seed,
            "config": config.to_dict(),
            "config_digest": config_digest(config),
            "artifacts": dict(sorted(self.artifacts.items())),
            "wall_clock": {"started": self.started, "finished": time.time()},
            **(extra or {}),
        }
        path.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def config_digest(config: ExperimentConfig) -> str:
    """Hash of the experiment settings; the output location is left out."""
    d = config.to_dict()
    d["run"] = {k: v for k, v in d["run"].items() if k != "out"}
    blob = json.dumps(d, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def dataset_digest(dataset: DistilledDataset) -> str:
    """Content hash over pixels, captions and provenance."""
    h = hashlib.sha256()
    for p in dataset.pairs:
        h.update(p.image_id.encode())
        h.update(to_uint8(p.image).tobytes())
        for c in p.captions:
            h.update(c.encode())
    for p in dataset.provenance:
        h.update(json.dumps(dataclasses.asdict(p), sort_keys=True).encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# corpora and models

def toy_spec(section: CorpusSection) -> ToyCorpusSpec:
    return ToyCorpusSpec(n_images=section.n_images, image_size=section.image_size,
                         captions_per_image=section.captions_per_image, grid=section.grid,
                         jitter=section.jitter, background=section.background,
                         radius_scale=section.radius_scale)


SPLIT_PREFIX = {"train": "toy", "validation": "val"}


def build_corpus(section: CorpusSection, split: str = "train", prefix: str | None = None) -> DatasetManifest:
    if section.kind == "manifest":
        return load_manifest(section.manifest)
    if section.kind != "toy":
        raise ConfigurationError(f"corpus kind {section.kind!r} cannot be built")
    return generate_toy_corpus(toy_spec(section), section.seed or 0, split,
                               prefix or SPLIT_PREFIX[split])


def source_corpus(config: ExperimentConfig, corpus: DatasetManifest) -> DatasetManifest:
    """Pretraining data: the ``source`` corpus, or the target corpus when it is unset."""
    if config.source.kind == "none":
        return corpus
    return build_corpus(config.source, "train", prefix="src")


def build_vocabulary(config: ExperimentConfig, corpus: DatasetManifest,
                     source: DatasetManifest | None = None) -> Vocabulary:
    extra = toy_spec(config.corpus).vocabulary() if config.corpus.kind == "toy" else ()
    captions = corpus.all_captions()
    if source is not None and source is not corpus:
        captions = captions + source.all_captions()
    return Vocabulary.from_captions(captions, extra, n_oov=config.model.vocab_oov)


def new_model(config: ExperimentConfig, corpus: DatasetManifest,
              source: DatasetManifest | None = None) -> EdgeDiffusion:
    import torch

    torch.manual_seed(config.pretrain.seed or 0)
    cfg = copy.deepcopy(config.model)
    cfg.image_size = config.corpus.image_size
    return EdgeDiffusion(cfg, build_vocabulary(config, corpus, source))


ALIGNED_STAGE = "pretrain+heads"


def pretrained_model(config: ExperimentConfig, corpus: DatasetManifest,
                     cache: Path | None = None) -> tuple[EdgeDiffusion, TrainingLog | None]:
    """The generator before EDGE fine-tuning, with its projection heads fit to ``corpus``.

    Loaded from ``pretrain.checkpoint`` or ``cache`` when present, otherwise
    trained on the source corpus with the plain denoising objective.  A
    loaded checkpoint whose heads were not yet fit gets them fit here.
    """
    pc = config.pretrain
    for path in (pc.checkpoint, cache):
        if path and Path(path).is_file():
            model, meta = load_checkpoint(path)
            if meta.get("stage") != ALIGNED_STAGE:
                model, _ = align_heads(model, corpus, pc.head_steps, pc.head_learning_rate,
                                       pc.head_batch_size, config.train.tau, pc.seed or 0)
            return model, None
    if pc.checkpoint:
        raise ConfigurationError(f"pretrain.checkpoint not found: {pc.checkpoint}")
    source = source_corpus(config, corpus)
    model = new_model(config, corpus, source)
    model, tlog = pretrain(model, source, pc.epochs, pc.learning_rate, pc.batch_size, pc.seed or 0)
    model, _ = align_heads(model, corpus, pc.head_steps, pc.head_learning_rate,
                           pc.head_batch_size, config.train.tau, pc.seed or 0)
    if cache is not None:
        save_checkpoint(model, cache, {"stage": ALIGNED_STAGE})
    return model, tlog


def distill_model(config: ExperimentConfig, corpus: DatasetManifest, base: EdgeDiffusion,
                  loss_mask: str | None = None) -> tuple[EdgeDiffusion, TrainingLog]:
    """Copy ``base`` and fine-tune it; ``loss_mask`` overrides ``train.loss_mask``."""
    tcfg = dataclasses.replace(config.train, loss_mask=loss_mask or config.train.loss_mask,
                               seed=config.train.seed or 0)
    return finetune(copy.deepcopy(base), corpus, tcfg)


# ---------------------------------------------------------------------------
# synthesis and captions

def make_captioner(section: CaptionerSection, corpus_section: CorpusSection | None = None):
    endpoint = os.environ.get(ENDPOINT_ENV) or section.endpoint
    if section.kind == "mllm":
        if not endpoint:
            raise ConfigurationError(
                f"captioner.endpoint is empty; set it in the config or via {ENDPOINT_ENV}"
            )
        return MLLMClient(endpoint, retries=section.retries, timeout=section.timeout)
    spec = toy_spec(corpus_section) if corpus_section is not None else ToyCorpusSpec()
    return TemplateCaptioner(spec)


def synthesize_distilled(
    config: ExperimentConfig, model: EdgeDiffusion, caption_source: DatasetManifest,
    *, cpi: int | None = None, pair_count: int | None = None, seed: int | None = None,
    caption: bool = True, baseline: bool = False, captioner=None,
) -> DistilledDataset:
    """Sample ``pair_count / cpi`` images and bring each to ``cpi`` captions.

    With ``synthesis.strategy = "post"`` extra captions describe the sampled
    image; with ``"pre"`` the seed caption is rephrased before sampling and
    the extra captions are further rephrasings of it.
    """
    syn = config.synthesis
    cpi = cpi or syn.cpi
    pair_count = pair_count or syn.pair_count
    seed = syn.seed if seed is None else seed
    request = SynthesisRequest(pair_count, caption_source, cpi, syn.sampler_steps or None,
                               seed or 0, syn.batch_size)
    captioner = captioner or make_captioner(config.captioner, config.corpus)
    if syn.strategy == "pre":
        if not hasattr(captioner, "rephrase"):
            raise ConfigurationError("the configured captioner cannot rephrase captions")
        rephrase = lambda caps: [captioner.rephrase(c) for c in caps]  # noqa: E731
        ds = synthesize(model, request, source="pretrained-baseline" if baseline else "edge",
                        captioner_id="pretrained-baseline" if baseline else "seed",
                        preprocess=rephrase)
        if caption and cpi > 1:
            pairs = [dataclasses.replace(p, captions=p.captions + tuple(
                _unique_rephrasings(captioner, p.captions[0], cpi - 1))) for p in ds.pairs]
            ds = ds.with_pairs(pairs, cpi)
        return ds
    if baseline:
        ds = baseline_pretrained_synthesize(model, request)
    else:
        ds = synthesize(model, request)
    if caption and cpi > 1:
        prompt = PROMPT_TEMPLATES[config.captioner.prompt]
        ds = expand(ds, cpi, captioner, prompt, config.captioner.workers)
        if baseline:
            # the baseline mark stays on provenance after captioning
            prov = [dataclasses.replace(p, captioner_id="pretrained-baseline") for p in ds.provenance]
            ds = ds.with_pairs(ds.pairs, ds.cpi, prov)
    return ds


def _unique_rephrasings(client, seed: str, count: int) -> list[str]:
    out: list[str] = []
    seen = {seed}
    text = seed
    for _ in range(count + 8):
        if len(out) == count:
            break
        text = client.rephrase(text)
        if text not in seen:
            out.append(text)
            seen.add(text)
    while len(out) < count:
        out.append(text)
    return out


# ---------------------------------------------------------------------------
# evaluation

def evaluate(config: ExperimentConfig, distilled: DistilledDataset, validation: DatasetManifest,
             seeds: Sequence[int] | None = None, loss_mask: str = "") -> EvaluationReport:
    report = evaluate_pipeline(distilled, validation, config.eval, seeds)
    report.meta.update({
        "loss_mask": loss_mask,
        "provenance_digest": dataset_digest(distilled),
        "pair_count": distilled.pair_count,
        "n_images": distilled.n_images,
        "cpi": distilled.cpi,
    })
    return report


def corpus_as_distilled(corpus: DatasetManifest) -> DistilledDataset:
    counts = {len(r.captions) for r in corpus.records}
    if len(counts) != 1:
        raise ValidationError("corpus images carry differing caption counts")
    return DistilledDataset(tuple(corpus.pairs()), counts.pop())


def fixed_alignment_encoder(corpus: DatasetManifest, config: EvalConfig, seed: int = 0) -> DualEncoder:
    """Evaluation encoder trained once on real data and then held fixed."""
    model, _ = train_eval_model(corpus_as_distilled(corpus), config, seed)
    return model


# ---------------------------------------------------------------------------
# ablation

@dataclass
class AblationRow:
    mask: str
    mean: dict[str, float]
    std: dict[str, float]
    n_images: int
    pair_count: int
    digest: str = ""


@dataclass
class AblationTable:
    rows: list[AblationRow]
    header: dict = field(default_factory=dict)

    def row(self, mask: str) -> AblationRow:
        for r in self.rows:
            if r.mask == mask:
                return r
        raise KeyError(mask)

    def to_json(self) -> dict:
        return {
            "header": self.header,
            "columns": list(RECALL_COLUMNS),
            "rows": [dataclasses.asdict(r) for r in self.rows],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AblationTable":
        return cls([AblationRow(**r) for r in d["rows"]], d.get("header", {}))

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def read_ablation_table(path: str | os.PathLike) -> AblationTable:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read ablation table {path}: {exc}") from exc
    return AblationTable.from_json(data)


def read_report(path: str | os.PathLike) -> EvaluationReport:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read metrics report {path}: {exc}") from exc
    return EvaluationReport.from_json(data)


def run_ablation(config: ExperimentConfig, masks: Sequence[str] | None = None,
                 pretrained: EdgeDiffusion | None = None, corpus: DatasetManifest | None = None,
                 validation: DatasetManifest | None = None,
                 tuned: dict[str, EdgeDiffusion] | None = None) -> AblationTable:
    """One pipeline run per mask with shared seeds, corpus and pretrained model.

    Every row samples the same ``pair_count / cpi`` images.  Rows without
    caption synthesis keep one caption per image; the last row fills each
    image up to ``cpi`` captions.  ``tuned`` caches fine-tuned models by
    distiller loss mask and is filled in place.
    """
    masks = list(masks or config.ablation.masks)
    bad = [m for m in masks if m not in ABLATION_MASKS]
    if bad:
        raise ConfigurationError(f"unknown ablation masks {bad}")
    corpus = corpus if corpus is not None else build_corpus(config.corpus)
    validation = validation if validation is not None else build_corpus(config.validation, "validation")
    if pretrained is None:
        pretrained, _ = pretrained_model(config, corpus)
    cpi = config.synthesis.cpi
    tuned = {} if tuned is None else tuned
    rows = []
    for mask in masks:
        loss = MASK_TO_LOSS[mask]
        if loss is None:
            model = pretrained
        else:
            if loss not in tuned:
                tuned[loss], _ = distill_model(config, corpus, pretrained, loss)
            model = tuned[loss]
        ds = synthesize_distilled(config, model, corpus, cpi=cpi,
                                  caption=mask == "edge_plus_caption_synthesis",
                                  baseline=loss is None)
        report = evaluate(config, ds, validation, loss_mask=mask)
        rows.append(AblationRow(mask, report.mean, report.std, ds.n_images, ds.pair_count,
                                dataset_digest(ds)))
        log.info("ablation %s: IR@1 %.3f TR@1 %.3f", mask, report.mean["IR@1"], report.mean["TR@1"])
    header = {
        "seed": config.run.seed,
        "eval_seeds": list(config.eval.seeds),
        "pair_count": config.synthesis.pair_count,
        "cpi": cpi,
        "config_digest": config_digest(config),
    }
    return AblationTable(rows, header)


def recall_score(mean: dict[str, float]) -> float:
    """IR@1 + TR@1, the quantity the component ablation is judged on."""
    return float(mean["IR@1"] + mean["TR@1"])

