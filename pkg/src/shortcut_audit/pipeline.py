"""Stage runner: extract, encode, rank, categorize, validate, occlude, evaluate.

Every stage reads the artifacts of its upstream stages from the output
directory and writes ``<stage>.json`` last, so a stage counts as done exactly
when its JSON exists.  Each JSON carries a provenance block with the stage
hash; rerunning with the same hash is a no-op, and a different hash is refused
unless ``force`` is set.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .config import PipelineConfig
from .encode import FeatureMatrix, build_feature_matrix, filter_low_quality, infer_schemas
from .errors import ConfigError, StageError
from .evaluator import evaluate
from .ingest import (
    LabelRule,
    assemble_sessions,
    dissect_capture,
    dump_records,
    load_records,
    parse_capture,
    run_external_dissector,
)
from .occlusion import build_tensors, occlude_all, write_occluded_pcap, write_tensors
from .plotting import plot_accuracy, plot_ami_topk, plot_kl_densities
from .ranker import AmiReport, load_denylist, rank_top_k
from .taxonomy import RELATIVE_ARTIFACT, TASK_AGNOSTIC, CategorizedReport, apply_assignment
from .validators import validate_candidates

log = logging.getLogger(__name__)

STAGES = ("extract", "encode", "rank", "categorize", "validate", "occlude", "evaluate")
DEPENDS = {
    "extract": (),
    "encode": ("extract",),
    "rank": ("encode",),
    "categorize": ("rank",),
    "validate": ("encode", "categorize"),
    "occlude": ("extract",),
    "evaluate": ("occlude",),
}
# config sections each stage's output depends on, upstream included
HASH_SECTIONS = {
    "extract": ("inputs", "dissector"),
    "encode": ("inputs", "dissector", "encode"),
    "rank": ("inputs", "dissector", "encode", "ranker", "seed"),
    "categorize": ("inputs", "dissector", "encode", "ranker", "seed", "taxonomy"),
    "validate": ("inputs", "dissector", "encode", "ranker", "seed", "taxonomy", "validator"),
    "occlude": ("inputs", "dissector", "occlusion", "seed"),
    "evaluate": ("inputs", "dissector", "occlusion", "seed", "evaluator"),
}

RECORDS = "records.ndjson"
MATRIX = "matrix"
BASELINE_TENSORS = "tensors_baseline.bin"


class DependencyError(StageError):
    pass


class CacheMismatch(ConfigError):
    pass


def upstream(stage: str) -> list[str]:
    """All stages ``stage`` depends on, directly or not, in workflow order."""
    seen: set[str] = set()
    todo = list(DEPENDS[stage])
    while todo:
        s = todo.pop()
        if s not in seen:
            seen.add(s)
            todo.extend(DEPENDS[s])
    return [s for s in STAGES if s in seen]


def _file_digest(path: str | Path | None) -> str | None:
    if not path:
        return None
    p = Path(path)
    if not p.is_file():
        return None
    h = hashlib.sha256()
    with open(p, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    """Write via a temporary file so a failure never leaves a half-written artifact."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_json(path: Path):
    return json.loads(path.read_text())


@dataclass
class StageOutcome:
    stage: str
    status: str  # "ran" or "cached"
    outputs: list[str] = field(default_factory=list)


class Pipeline:
    def __init__(self, config: PipelineConfig, output_dir: str | Path | None = None,
                 workers: int | None = None, force: bool = False):
        self.cfg = config
        self.out = Path(output_dir if output_dir is not None else config.output_dir)
        self.workers = workers if workers is not None else config.workers
        self.force = force
        self._input_digests: list[str | None] | None = None

    # provenance and caching

    def input_digests(self) -> list[str | None]:
        if self._input_digests is None:
            self._input_digests = [_file_digest(i.path) for i in self.cfg.inputs]
        return self._input_digests

    def stage_hash(self, stage: str) -> str:
        parts = {"config": self.cfg.hash(HASH_SECTIONS[stage]), "inputs": self.input_digests()}
        if "taxonomy" in HASH_SECTIONS[stage]:
            parts["assignment"] = _file_digest(self.cfg.taxonomy.assignment)
        if "ranker" in HASH_SECTIONS[stage]:
            parts["denylist"] = _file_digest(self.cfg.ranker.denylist)
        return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()

    def provenance(self, stage: str | None = None) -> dict:
        d = {"config_hash": self.cfg.hash(), "seed": self.cfg.seed, "tool": "shortcut-audit",
             "version": __version__}
        if stage is not None:
            d["stage"] = stage
            d["stage_hash"] = self.stage_hash(stage)
        return d

    def artifact(self, stage: str) -> Path:
        return self.out / f"{stage}.json"

    def cached_hash(self, stage: str) -> str | None:
        path = self.artifact(stage)
        if not path.exists():
            return None
        try:
            return read_json(path)["provenance"]["stage_hash"]
        except (ValueError, KeyError, TypeError):
            return "unreadable"

    def check_dependencies(self, stage: str) -> None:
        """Every upstream stage, checked in workflow order, must have a current artifact."""
        for dep in upstream(stage):
            found = self.cached_hash(dep)
            if found is None:
                raise DependencyError(f"stage '{stage}' needs the output of stage '{dep}' "
                                      f"({self.artifact(dep).name} not found in {self.out}); run '{dep}' first")
            if found != self.stage_hash(dep):
                raise DependencyError(f"stage '{stage}' needs stage '{dep}', but {self.artifact(dep).name} was "
                                      f"produced by a different configuration; rerun '{dep}'")

    def run_stage(self, stage: str) -> StageOutcome:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
        self.out.mkdir(parents=True, exist_ok=True)
        current = self.stage_hash(stage)
        found = self.cached_hash(stage)
        if found == current and not self.force:
            log.info("stage %s: up to date", stage)
            return StageOutcome(stage, "cached")
        if found is not None and found != current and not self.force:
            raise CacheMismatch(f"{self.artifact(stage)} was produced by a different configuration; "
                                f"refusing to overwrite it without --force")
        self.check_dependencies(stage)
        log.info("stage %s: running", stage)
        runner: Callable[[], dict] = getattr(self, f"_stage_{stage}")
        try:
            body = runner()
        except (StageError, ConfigError):
            raise
        except Exception as exc:
            raise StageError(f"stage '{stage}' failed: {exc}") from exc
        outputs = body.pop("_outputs", [])
        write_json(self.artifact(stage), {"provenance": self.provenance(stage), **body})
        return StageOutcome(stage, "ran", [self.artifact(stage).name, *outputs])

    def run(self, stages: Sequence[str] | None = None) -> list[StageOutcome]:
        for s in stages or ():
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
        wanted = list(STAGES) if not stages else sorted(set(stages), key=STAGES.index)
        return [self.run_stage(s) for s in wanted]

    # shared loaders

    def label_rule(self) -> LabelRule:
        rule = LabelRule()
        for inp in self.cfg.inputs:
            if inp.label is not None:
                rule.by_source[inp.source] = inp.label
            rule.tag_by_source[inp.source] = inp.dataset_tag
            if inp.flow_labels:
                rule.flow_labels.update(LabelRule.read_flow_labels(inp.flow_labels))
        return rule

    def load_records(self):
        return load_records(self.out / RECORDS, "ndjson").records

    def load_matrix(self) -> FeatureMatrix:
        return FeatureMatrix.load(self.out / MATRIX)

    def session_tensors(self):
        """Session tensors rebuilt from the extracted records plus the original capture bytes."""
        parsed: dict[tuple[str, int], object] = {}
        for inp in self.cfg.inputs:
            if inp.format == "pcap":
                for idx, pkt in parse_capture(inp.path).items():
                    parsed[(inp.source, idx)] = pkt
        records = self.load_records()
        pairs = ((r, parsed.get((r.source, r.capture_index))) for r in records)
        sessions = assemble_sessions(pairs, self.label_rule()).sessions
        tensors = build_tensors(sessions)
        if not tensors:
            raise StageError("no session has packet bytes; occlusion needs pcap inputs")
        return tensors

    # stages

    def _stage_extract(self) -> dict:
        records, per_input = [], []
        d = self.cfg.dissector
        for inp in self.cfg.inputs:
            if inp.format == "pcap" and d.mode == "external":
                batch = run_external_dissector(inp.path, d.fields, d.binary, d.extra_args, source=inp.source)
            elif inp.format == "pcap":
                batch = dissect_capture(inp.path, source=inp.source)
            else:
                batch = load_records(inp.path, inp.format, source=inp.source)
            records.extend(batch.records)
            per_input.append({"source": inp.source, "label": inp.label, "dataset_tag": inp.dataset_tag,
                              "format": inp.format, "packets": len(batch.records),
                              "skipped": dict(sorted(batch.skipped.items())), "warnings": batch.warnings})
        if not records:
            raise StageError("no packet records were extracted")
        dump_records(records, self.out / RECORDS)
        return {"inputs": per_input, "records": len(records), "dissector": d.mode, "_outputs": [RECORDS]}

    def _stage_encode(self) -> dict:
        records = self.load_records()
        schemas = infer_schemas(records)
        kept, quality = filter_low_quality(records, schemas, self.cfg.encode.min_valid_fraction)
        sessions = assemble_sessions(((r, None) for r in records), self.label_rule())
        matrix = build_feature_matrix(sessions.sessions, kept, schemas)
        if matrix.n_samples == 0:
            raise StageError("no labeled packets survived encoding")
        files = [p.name for p in matrix.save(self.out / MATRIX)]
        return {
            "quality": quality.to_dict(),
            "shape": list(matrix.shape),
            "sessions": len(sessions.sessions),
            "unlabeled_flows": sessions.unlabeled_flows,
            "class_names": matrix.class_names,
            "dataset_tags": sorted(set(matrix.dataset_tags.tolist())),
            "schemas": {c: matrix.schemas[c].kind for c in matrix.columns},
            "_outputs": files,
        }

    def _stage_rank(self) -> dict:
        r = self.cfg.ranker
        matrix = self.load_matrix()
        report = rank_top_k(matrix, r.k, denylist=load_denylist(r.denylist), min_entropy=r.min_entropy,
                            min_valid_fraction=r.min_valid_fraction, max_bins=r.max_bins,
                            cost_bound=r.cost_bound, seed=self.cfg.seed, workers=self.workers)
        report.write_csv(self.out / "ami.csv")
        plot_ami_topk([e.to_dict() for e in report.candidates], self.out / "ami_topk.svg")
        return {**report.to_dict(), "_outputs": ["ami.csv", "ami_topk.svg"]}

    def _stage_categorize(self) -> dict:
        report = AmiReport.from_dict(read_json(self.artifact("rank")))
        cat = apply_assignment(report, self.cfg.taxonomy.assignment)
        return {**cat.to_dict(), "assignment_file": self.cfg.taxonomy.assignment}

    def _stage_validate(self) -> dict:
        v = self.cfg.validator
        matrix = self.load_matrix()
        cat = CategorizedReport.from_dict(read_json(self.artifact("categorize")))
        rep = validate_candidates(
            matrix, cat.fields_in(RELATIVE_ARTIFACT), cat.fields_in(TASK_AGNOSTIC), kind=v.kind,
            dataset_pair=tuple(v.dataset_pair) if v.dataset_pair else None, min_samples=v.min_samples,
            symmetric=v.symmetric, max_bins=self.cfg.ranker.max_bins, workers=self.workers)
        outputs = []
        if rep.task_agnostic:
            rep.write_density_csv(self.out / "densities.csv")
            outputs.append("densities.csv")
            rows = read_density_rows(self.out / "densities.csv")
            for rec in rep.task_agnostic:
                name = f"kl_{rec.field}.svg"
                plot_kl_densities(rows, rec.field, self.out / name, rec.kl_avg)
                outputs.append(name)
        return {**rep.to_dict(), "_outputs": outputs}

    def _stage_occlude(self) -> dict:
        tensors = self.session_tensors()
        class_names = sorted({t.label for t in tensors})
        _, base_index = write_tensors(self.out / BASELINE_TENSORS, tensors, class_names)
        outputs = [BASELINE_TENSORS, base_index.name]
        specs = []
        for entry in self.cfg.occlusion:
            spec = entry.spec(self.cfg.seed)
            occluded = occlude_all(tensors, spec, self.workers)
            path, index = write_tensors(self.out / f"tensors_{entry.name}.bin", occluded, class_names,
                                        extra={"occlusion": spec.to_dict()})
            pcap = f"occluded_{entry.name}.pcap"
            frames = write_occluded_pcap(self.out / pcap, occluded)
            warnings = sorted({w for t in occluded for w in t.warnings})
            flags: dict[str, int] = {}
            for t in occluded:
                for f in {f for fl in t.flags for f in fl}:
                    flags[f] = flags.get(f, 0) + 1
            specs.append({"name": entry.name, "spec": spec.to_dict(), "tensors": path.name,
                          "sha256": read_json(index)["sha256"], "pcap": pcap, "frames": frames,
                          "warnings": warnings, "flagged_sessions": dict(sorted(flags.items()))})
            outputs += [path.name, index.name, pcap]
        counts = {c: sum(t.label == c for t in tensors) for c in class_names}
        return {"sessions": len(tensors), "class_counts": counts,
                "baseline_sha256": read_json(base_index)["sha256"], "strategies": specs, "_outputs": outputs}

    def _stage_evaluate(self) -> dict:
        occ = read_json(self.artifact("occlude"))
        tensors = self.session_tensors()
        ev = self.cfg.evaluator
        specs = [(e.name, e.spec(self.cfg.seed)) for e in self.cfg.occlusion]
        if len(tensors) != occ["sessions"]:
            raise StageError("session tensors differ from the occlude stage output; rerun 'occlude'")
        report = evaluate(tensors, specs, ev.protocol(self.cfg.seed), ev.tree_params(), ev.dataset, self.workers)
        report.write_csv(self.out / "accuracy.csv")
        report.write_split_audit(self.out / "split_audit.json")
        body = report.to_dict()
        plot_accuracy(body, self.out / "accuracy.svg")
        return {**body, "_outputs": ["accuracy.csv", "split_audit.json", "accuracy.svg"]}

    # summary

    def report(self) -> dict:
        """Aggregate every available stage artifact into ``summary.json`` and redraw figures."""
        self.out.mkdir(parents=True, exist_ok=True)
        present = {s: read_json(self.artifact(s)) for s in STAGES if self.artifact(s).exists()}
        if not present:
            raise DependencyError(f"no stage artifacts in {self.out}; run at least 'extract'")
        summary: dict = {"provenance": self.provenance(), "stages": {}}
        for s, body in present.items():
            prov = body.get("provenance", {})
            summary["stages"][s] = {"artifact": self.artifact(s).name, "stage_hash": prov.get("stage_hash"),
                                    "current": prov.get("stage_hash") == self.stage_hash(s)}
        categories = {}
        if "categorize" in present:
            categories = {f["field"]: f["category"] for f in present["categorize"]["fields"]}
        if "rank" in present:
            cands = [e for e in present["rank"]["entries"] if e["candidate"]]
            summary["candidates"] = [{"rank": e["rank"], "field": e["field"], "ami": e["ami"],
                                      "category": categories.get(e["field"])} for e in cands]
            plot_ami_topk(cands, self.out / "ami_topk.svg")
            if categories:
                plot_ami_topk(cands, self.out / "ami_topk_categorized.svg", categories)
        if "categorize" in present:
            summary["needs_review"] = present["categorize"]["needs_review"]
        if "validate" in present:
            v = present["validate"]
            summary["relative_artifacts"] = [{"field": r["field"], "delta_ami": r["delta_ami"]}
                                             for r in v["relative_artifact"]]
            summary["task_agnostic"] = [{"field": r["field"], "kl_avg": r["kl_avg"]} for r in v["task_agnostic"]]
            density = self.out / "densities.csv"
            if v["task_agnostic"] and density.exists():
                rows = read_density_rows(density)
                for r in v["task_agnostic"]:
                    plot_kl_densities(rows, r["field"], self.out / f"kl_{r['field']}.svg", r["kl_avg"])
        if "evaluate" in present:
            e = present["evaluate"]
            summary["accuracy"] = {
                "dataset": e["dataset"], "chance": e["chance"], "baseline": e["baseline"]["mean"],
                "strategies": {s["name"]: {"mean": s["mean"], "delta": s["delta"]} for s in e["strategies"]},
            }
            plot_accuracy(e, self.out / "accuracy.svg")
        write_json(self.out / "summary.json", summary)
        return summary


def read_density_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_pipeline(config: PipelineConfig, stages: Sequence[str] | None = None, *,
                 output_dir: str | Path | None = None, workers: int | None = None,
                 force: bool = False, summary: bool = True) -> list[StageOutcome]:
    """Run the requested stages in workflow order, then refresh the summary."""
    pipe = Pipeline(config, output_dir, workers, force)
    outcomes = pipe.run(stages)
    if summary:
        pipe.report()
    return outcomes
