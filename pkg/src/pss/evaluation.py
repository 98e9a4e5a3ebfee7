"""Accuracy bookkeeping and deterministic run reports.

The central record is the lower-triangular accuracy matrix: row ``t``
holds the binary test accuracy of every task ``j <= t`` measured right
after task ``t`` finished training. Average accuracy, forgetting and
the multiclass trace all derive from it.

Reports serialize to JSON with sorted keys and no timing information,
so two runs from the same seed produce byte-identical files.
"""

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np


def binary_predictions(logits):
    """Decide positive iff the logit is >= 0, i.e. sigmoid >= 1/2."""
    return (np.asarray(logits) >= 0.0).astype(np.float64)


def task_accuracy(net, task_data, output_index=None):
    """Accuracy of one task's output node on its binary test set."""
    if output_index is None:
        output_index = task_data.task
    logits = net.predict(task_data.x)[:, output_index]
    return float(np.mean(binary_predictions(logits) == task_data.y))


def multiclass_accuracy(net, pool_x, pool_y):
    """Argmax over all existing output logits against true class labels.

    No task identity is given at test time: the highest logit wins.
    Classes whose output node does not exist yet can never be predicted
    and simply count as errors, so mid-stream values are pessimistic.
    """
    if net.n_outputs == 0:
        raise ValueError("network has no output nodes yet")
    logits = net.predict(pool_x)
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == np.asarray(pool_y)))


def average_accuracy(matrix, boundary=-1):
    """Mean accuracy over all tasks seen so far, at one boundary."""
    row = matrix[boundary]
    if not row:
        raise ValueError("empty accuracy row")
    return float(np.mean(row))


def forgetting(matrix):
    """Per-task forgetting and its mean, from the final boundary.

    Task ``j``'s forgetting is its best accuracy at any boundary minus
    its final accuracy; the last task has no history and is excluded
    from the mean. With no completed earlier tasks the mean is 0.0.
    """
    last = matrix[-1]
    per_task = []
    for j in range(len(last) - 1):
        best = max(matrix[t][j] for t in range(j, len(matrix)))
        per_task.append(float(best - last[j]))
    mean = float(np.mean(per_task)) if per_task else 0.0
    return per_task, mean


@dataclass
class RunReport:
    """Everything measurable about one lifelong run, minus wall time."""

    mode: str
    seed: int
    config: dict
    accuracy_matrix: list = field(default_factory=list)
    multiclass: list = field(default_factory=list)
    hidden_sizes: list = field(default_factory=list)    # per boundary
    parameter_counts: list = field(default_factory=list)
    split_counts: list = field(default_factory=list)    # per task
    filler_counts: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)    # per task, per epoch
    schema: int = 1

    def final_average_accuracy(self):
        return average_accuracy(self.accuracy_matrix)

    def mean_forgetting(self):
        return forgetting(self.accuracy_matrix)[1]

    def to_dict(self):
        per_task, mean = forgetting(self.accuracy_matrix) \
            if self.accuracy_matrix else ([], 0.0)
        return {
            "schema": self.schema,
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "accuracy_matrix": self.accuracy_matrix,
            "multiclass": self.multiclass,
            "hidden_sizes": self.hidden_sizes,
            "parameter_counts": self.parameter_counts,
            "split_counts": self.split_counts,
            "filler_counts": self.filler_counts,
            "epoch_losses": self.epoch_losses,
            "derived": {
                "final_average_accuracy": average_accuracy(self.accuracy_matrix)
                if self.accuracy_matrix else None,
                "per_task_forgetting": per_task,
                "mean_forgetting": mean,
            },
        }

    @classmethod
    def from_dict(cls, d):
        return cls(mode=d["mode"], seed=d["seed"], config=d["config"],
                   accuracy_matrix=d["accuracy_matrix"],
                   multiclass=d["multiclass"],
                   hidden_sizes=d["hidden_sizes"],
                   parameter_counts=d["parameter_counts"],
                   split_counts=d["split_counts"],
                   filler_counts=d["filler_counts"],
                   epoch_losses=d["epoch_losses"],
                   schema=d["schema"])

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def csv_rows(self):
        """Long-format numeric view: kind, boundary, task, layer, epoch, value."""
        rows = []
        for t, row in enumerate(self.accuracy_matrix):
            for j, acc in enumerate(row):
                rows.append(("binary_accuracy", t, j, "", "", acc))
            rows.append(("average_accuracy", t, "", "", "",
                         average_accuracy(self.accuracy_matrix, t)))
        for t, acc in enumerate(self.multiclass):
            rows.append(("multiclass_accuracy", t, "", "", "", acc))
        for t, sizes in enumerate(self.hidden_sizes):
            for l, size in enumerate(sizes):
                rows.append(("hidden_size", t, "", l, "", size))
        for t, count in enumerate(self.parameter_counts):
            rows.append(("parameter_count", t, "", "", "", count))
        for t, count in enumerate(self.split_counts):
            rows.append(("split_count", t, "", "", "", count))
        for t, count in enumerate(self.filler_counts):
            rows.append(("filler_count", t, "", "", "", count))
        for t, losses in enumerate(self.epoch_losses):
            for e, loss in enumerate(losses):
                rows.append(("epoch_loss", t, "", "", e, loss))
        if self.accuracy_matrix:
            per_task, mean = forgetting(self.accuracy_matrix)
            for j, f in enumerate(per_task):
                rows.append(("forgetting", "", j, "", "", f))
            rows.append(("mean_forgetting", "", "", "", "", mean))
        return rows

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "boundary", "task", "layer", "epoch", "value"])
        for kind, boundary, task, layer, epoch, value in self.csv_rows():
            writer.writerow([kind, boundary, task, layer, epoch,
                             repr(value) if isinstance(value, float) else value])
        return buf.getvalue()


def export(report, out_dir):
    """Write report.json and report.csv; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    csv_path = os.path.join(out_dir, "report.csv")
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(report.to_csv())
    return json_path, csv_path
