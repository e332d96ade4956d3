"""Cached-episode evaluation: train every method on the same episode list,
aggregate accuracies, and emit the comparison report.

The report is JSON (full detail) plus CSV summaries laid out like the
accuracy tables (rows = domains, columns = methods, cells mean +/- CI),
with kernel-weight CSVs and rendered figures alongside. Episode workers
run in parallel; the reduction is ordered, so output bytes do not depend
on the worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episode import load_episode
from .stacker import Method, write_kernel_csv
from .stats import friedman_nemenyi, mean_ci95, paired_t_test
from .training import AblationMode, TrainConfig, score_episode, train_stacker


@dataclass(frozen=True)
class MethodSpec:
    """One column of the evaluation: a method, its config, and a label."""

    label: str
    method: Method
    config: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationMode = AblationMode.FULL


def _evaluate_episode(args):
    index, path, specs, seed = args
    try:
        bundle = load_episode(path)
        accs, omissions, kernels = [], [], []
        for spec in specs:
            stacker = train_stacker(
                bundle, spec.method, spec.config, spec.ablation, seed
            )
            accs.append(score_episode(stacker, bundle))
            omissions.append(stacker.omission_rate)
            kernels.append(stacker.effective)
        return {
            "index": index,
            "domain": bundle.domain_name,
            "episode_id": bundle.episode_id,
            "accuracy": accs,
            "omission": omissions,
            "kernels": kernels,
        }
    except Exception as exc:
        raise RuntimeError(f"episode {path}: {exc}") from exc


@dataclass
class EvalReport:
    labels: list
    specs: list
    domains: list
    episode_ids: dict
    accuracy: dict  # domain -> (episodes, methods) array
    omission: dict  # domain -> (episodes, methods) array
    mean_kernels: dict  # (domain, label) -> mean effective kernel
    seed: int

    def summary(self) -> dict:
        out = {}
        for domain in self.domains:
            acc = self.accuracy[domain]
            per_method = {}
            for m, label in enumerate(self.labels):
                col = acc[:, m]
                if col.size >= 2:
                    mean, half = mean_ci95(col)
                else:
                    mean, half = float(col.mean()), None
                per_method[label] = {
                    "mean": mean,
                    "ci95_halfwidth": half,
                    "n": int(col.size),
                }
            out[domain] = per_method
        return out

    def pairwise_tests(self) -> dict:
        out = {}
        for domain in self.domains:
            acc = self.accuracy[domain]
            pairs = {}
            if acc.shape[0] >= 2:
                for i in range(len(self.labels)):
                    for j in range(i + 1, len(self.labels)):
                        res = paired_t_test(acc[:, i], acc[:, j])
                        pairs[f"{self.labels[i]} vs {self.labels[j]}"] = {
                            "t": res.t if np.isfinite(res.t) else None,
                            "p_two_sided": res.p_two_sided,
                            "degenerate": res.degenerate,
                        }
            out[domain] = pairs
        return out

    def rank_analysis(self):
        """Friedman test and Nemenyi critical distance over all episodes of
        all domains pooled, mirroring the rank diagrams' pooling."""
        if len(self.labels) < 2:
            return None
        pooled = np.concatenate([self.accuracy[d] for d in self.domains], axis=0)
        if pooled.shape[0] < 2:
            return None
        result = friedman_nemenyi(pooled)
        return {
            "n_episodes": int(pooled.shape[0]),
            "mean_ranks": {
                label: float(result.mean_ranks[i])
                for i, label in enumerate(self.labels)
            },
            "friedman_stat": result.friedman_stat,
            "friedman_p": result.p_value,
            "nemenyi_cd": result.cd,
            "cliques": [
                [self.labels[i] for i in clique] for clique in result.cliques
            ],
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "seed": self.seed,
            "methods": list(self.labels),
            "method_specs": [
                {
                    "label": s.label,
                    "method": s.method.value,
                    "ablation": s.ablation.value,
                    "ridge_strength": s.config.ridge_strength,
                    "conv_size": s.config.conv_size,
                    "conv_stride": s.config.conv_stride,
                }
                for s in self.specs
            ],
            "domains": list(self.domains),
            "episodes": {d: list(self.episode_ids[d]) for d in self.domains},
            "per_episode_accuracy": {
                d: {
                    label: [float(v) for v in self.accuracy[d][:, m]]
                    for m, label in enumerate(self.labels)
                }
                for d in self.domains
            },
            "summary": self.summary(),
            "pairwise_t": self.pairwise_tests(),
            "omission": {
                d: {
                    label: float(self.omission[d][:, m].mean())
                    for m, label in enumerate(self.labels)
                }
                for d in self.domains
            },
            "ranks": self.rank_analysis(),
        }

    def _cell(self, domain, label, m) -> str:
        col = self.accuracy[domain][:, m]
        if col.size >= 2:
            mean, half = mean_ci95(col)
            return f"{100 * mean:.1f}±{100 * half:.1f}"
        return f"{100 * float(col.mean()):.1f}±n/a"

    def write(self, out_dir, figures: bool = True) -> dict:
        """Write report.json, summary/omission CSVs, kernel CSVs, and (by
        default) the rendered figures. Returns the written paths by kind."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = {}

        report_path = out / "report.json"
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        report_path.write_bytes(text.encode("utf-8"))
        written["report"] = report_path

        header = ["domain"] + list(self.labels)
        lines = [",".join(header)]
        for domain in self.domains:
            cells = [self._cell(domain, label, m) for m, label in enumerate(self.labels)]
            lines.append(",".join([domain] + cells))
        summary_path = out / "summary.csv"
        summary_path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
        written["summary"] = summary_path

        lines = [",".join(header)]
        for domain in self.domains:
            cells = [
                f"{100 * float(self.omission[domain][:, m].mean()):.1f}"
                for m in range(len(self.labels))
            ]
            lines.append(",".join([domain] + cells))
        omission_path = out / "omission.csv"
        omission_path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
        written["omission"] = omission_path

        kernel_dir = out / "kernels"
        kernel_dir.mkdir(exist_ok=True)
        written["kernels"] = []
        for (domain, label), kernel in sorted(self.mean_kernels.items()):
            path = kernel_dir / f"{domain}__{label}.csv"
            write_kernel_csv(kernel, path)
            written["kernels"].append(path)

        if figures:
            from . import figures as fig

            fig_dir = out / "figures"
            fig_dir.mkdir(exist_ok=True)
            written["figures"] = []
            for (domain, label), kernel in sorted(self.mean_kernels.items()):
                path = fig_dir / f"{domain}__{label}_kernel.png"
                fig.save_kernel_heatmap(
                    kernel, path, title=f"{label} mean kernel, {domain}"
                )
                written["figures"].append(path)
            ranks = self.rank_analysis()
            if ranks is not None:
                path = fig_dir / "cd_diagram.png"
                fig.save_cd_diagram(
                    list(self.labels),
                    [ranks["mean_ranks"][label] for label in self.labels],
                    ranks["nemenyi_cd"],
                    path,
                )
                written["figures"].append(path)
        return written


def evaluate_suite(episode_paths, specs, seed: int = 0, jobs: int = 1) -> EvalReport:
    """Train and score every method spec on every episode bundle.

    All methods see the identical episode list. Episodes are processed in
    parallel when jobs > 1, with a deterministic ordered reduction, so the
    resulting report is identical for any worker count. Any episode failure
    aborts the run with the episode path in the diagnostic.
    """
    paths = [str(p) for p in episode_paths]
    if not paths:
        raise ValueError("no episodes to evaluate")
    specs = list(specs)
    if not specs:
        raise ValueError("no method specs to evaluate")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError("method spec labels must be unique")

    tasks = [(i, path, specs, seed) for i, path in enumerate(paths)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_episode, tasks))
    else:
        results = [_evaluate_episode(t) for t in tasks]
    results.sort(key=lambda r: r["index"])

    domains = []
    episode_ids: dict = {}
    acc_rows: dict = {}
    omit_rows: dict = {}
    kernel_sums: dict = {}
    for rec in results:
        domain = rec["domain"]
        if domain not in acc_rows:
            domains.append(domain)
            episode_ids[domain] = []
            acc_rows[domain] = []
            omit_rows[domain] = []
        episode_ids[domain].append(rec["episode_id"])
        acc_rows[domain].append(rec["accuracy"])
        omit_rows[domain].append(rec["omission"])
        for label, kernel in zip(labels, rec["kernels"]):
            key = (domain, label)
            if key in kernel_sums:
                kernel_sums[key] = kernel_sums[key] + kernel
            else:
                kernel_sums[key] = kernel.copy()

    accuracy = {d: np.asarray(acc_rows[d], dtype=np.float64) for d in domains}
    omission = {d: np.asarray(omit_rows[d], dtype=np.float64) for d in domains}
    mean_kernels = {
        key: kernel_sums[key] / len(episode_ids[key[0]]) for key in kernel_sums
    }
    return EvalReport(
        labels=labels,
        specs=specs,
        domains=domains,
        episode_ids=episode_ids,
        accuracy=accuracy,
        omission=omission,
        mean_kernels=mean_kernels,
        seed=seed,
    )
