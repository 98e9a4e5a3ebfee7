"""Drift detection, neuron splitting and generation-isolated growth.

The network trains one binary task at a time. Every hidden neuron and
every output node carries a generation tag: the index of the task that
created it. At task start the incoming weights of all hidden neurons
are snapshotted. While the task trains, each old neuron's semantic
drift is the squared L2 distance between its current incoming weights
(plus bias) and the snapshot. A neuron whose drift exceeds the current
threshold is split: a copy carrying the drifted weights is appended as
a new neuron of the current generation, and the original is reverted
to its snapshot so whatever it encoded for earlier tasks is restored.

Generations are isolated by the connectivity rule

    edge u -> v between hidden neurons is structurally absent
    iff generation(u) > generation(v),

so information flows from old structure into new structure but never
back. Hidden-to-output edges are exempt from the rule; instead, a new
neuron's weights toward pre-existing output nodes start at exactly 0.0
and stay frozen, which keeps earlier tasks' output logits unchanged to
the last bit as long as the old generations themselves are frozen.

Thresholds escalate as a task ages: the effective threshold for layer
``l`` after ``e`` completed epochs is ``sigma[l] + e * delta[l]``, so
early drift splits readily while late drift has to be large.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DEFAULT_LEAKY_SLOPE,
    IDENTITY,
    DimensionError,
    MaskedLayer,
    MaskError,
    forward,
    he_normal,
    leaky_relu,
)


@dataclass(frozen=True)
class NeuronTag:
    """Identity of one hidden neuron: layer, position, creating task."""

    layer: int
    index: int
    generation: int


@dataclass
class Snapshot:
    """Hidden-layer weights and biases as they stood at task start."""

    task: int
    weights: list
    biases: list

    @classmethod
    def of(cls, network):
        return cls(task=network.task,
                   weights=[l.weights.copy() for l in network.hidden_layers],
                   biases=[l.bias.copy() for l in network.hidden_layers])


class DriftSchedule:
    """Per-layer split threshold that grows with epochs into the task.

    ``current(l)`` is always computed as ``sigma[l] + epochs_elapsed *
    delta[l]`` from the stored integers, never by repeated addition, so
    the threshold for a given epoch is the same no matter how the
    schedule got there.
    """

    def __init__(self, sigma, delta, n_layers):
        self.sigma = self._spread(sigma, n_layers, "sigma")
        self.delta = self._spread(delta, n_layers, "delta")
        self.epochs_elapsed = 0

    @staticmethod
    def _spread(value, n_layers, name):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = np.full(n_layers, float(arr))
        if arr.shape != (n_layers,):
            raise DimensionError(
                f"{name} must be a scalar or one value per hidden layer "
                f"({n_layers}), got shape {arr.shape}")
        if np.any(arr < 0):
            raise ValueError(f"{name} must be non-negative")
        return arr

    def current(self, layer):
        return float(self.sigma[layer] + self.epochs_elapsed * self.delta[layer])

    def escalate(self):
        self.epochs_elapsed += 1

    def reset(self):
        self.epochs_elapsed = 0


@dataclass
class SplitReport:
    """What one splitting round did."""

    task: int
    epoch: int
    thresholds: list
    splits: list = field(default_factory=list)    # NeuronTag of each original
    new_neurons: list = field(default_factory=list)  # NeuronTag of each copy
    fillers: list = field(default_factory=list)   # NeuronTag of support fillers
    drifts: list = field(default_factory=list)    # drift value per split, same order

    @property
    def total_splits(self):
        return len(self.splits)

    @property
    def total_fillers(self):
        return len(self.fillers)


def generation_runs(gens):
    """Maximal runs of equal generation as (start, stop) pairs.

    Generations are appended in non-decreasing order, so runs for old
    generations keep their boundaries forever; only the newest run can
    extend. That stability is what lets the blocked forward pass
    reproduce old pre-activations bit for bit after the network grows.
    """
    runs = []
    start = 0
    for i in range(1, len(gens)):
        if gens[i] != gens[i - 1]:
            runs.append((start, i))
            start = i
    if len(gens):
        runs.append((start, len(gens)))
    return runs


FREEZE_SCOPES = ("full_truncated", "pss_only")


class PlasticNetwork:
    """Feedforward binary-multi-head network that grows by splitting.

    ``layers`` holds the hidden layers followed by one output layer.
    The output layer starts empty and gains one node per task via
    ``grow_output``. All structural bookkeeping (generation tags,
    connectivity masks, block partitions for the stable forward pass)
    lives here; the training loop drives it from outside.
    """

    def __init__(self, layers, hidden_gens, output_gens, task=-1, rng=None):
        if len(layers) < 2:
            raise DimensionError("need at least one hidden layer plus the output layer")
        self.layers = layers
        self.hidden_gens = [list(int(g) for g in gs) for gs in hidden_gens]
        self.output_gens = [int(g) for g in output_gens]
        self.task = int(task)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.snapshot = None
        self.schedule = None
        self.freeze_scope = "full_truncated"
        self._split_done = [set() for _ in self.hidden_layers]
        self._small_frozen = None

    # -- construction ----------------------------------------------------

    @classmethod
    def new(cls, n_features, hidden_sizes, rng, slope=DEFAULT_LEAKY_SLOPE):
        """Fresh network: He-initialised hidden trunk, empty output layer.

        The trunk belongs to generation 0, the task that trains first.
        """
        if not hidden_sizes or any(int(h) < 1 for h in hidden_sizes):
            raise DimensionError("hidden_sizes must be non-empty, all >= 1")
        layers = []
        fan_in = int(n_features)
        for h in hidden_sizes:
            h = int(h)
            layers.append(MaskedLayer(he_normal(h, fan_in, rng), np.zeros(h),
                                      activation=leaky_relu(slope)))
            fan_in = h
        layers.append(MaskedLayer(np.zeros((0, fan_in)), np.zeros(0),
                                  np.zeros((0, fan_in)), np.zeros((0, fan_in)),
                                  np.zeros(0), IDENTITY))
        gens = [[0] * int(h) for h in hidden_sizes]
        return cls(layers, gens, [], task=-1, rng=rng)

    # -- views -------------------------------------------------------------

    @property
    def hidden_layers(self):
        return self.layers[:-1]

    @property
    def output_layer(self):
        return self.layers[-1]

    @property
    def n_hidden_layers(self):
        return len(self.layers) - 1

    @property
    def n_outputs(self):
        return self.output_layer.fan_out

    @property
    def n_features(self):
        return self.layers[0].fan_in

    def hidden_sizes(self):
        return [l.fan_out for l in self.hidden_layers]

    def parameter_count(self):
        """Structurally present weights plus biases."""
        total = 0
        for l in self.layers:
            total += int(l.conn_mask.sum()) + l.fan_out
        return total

    def current_output_index(self):
        """Index of the output node belonging to the current task."""
        for j, g in enumerate(self.output_gens):
            if g == self.task:
                return j
        return None

    def blocks(self):
        """Per-layer (row_blocks, col_blocks) for the stable forward pass.

        Hidden layers are partitioned by generation runs on both axes;
        the output layer uses one row block per output node so each
        logit's summation order is independent of its neighbours.
        """
        out = []
        prev_runs = [(0, self.n_features)]
        for i, layer in enumerate(self.hidden_layers):
            rows = generation_runs(self.hidden_gens[i])
            out.append((rows, prev_runs))
            prev_runs = rows
        out_rows = [(j, j + 1) for j in range(self.n_outputs)]
        out.append((out_rows, prev_runs))
        return out

    def predict(self, x):
        """Logits for every output node, shape (n, n_outputs)."""
        return forward(self.layers, x, self.blocks()).output

    def trace(self, x):
        return forward(self.layers, x, self.blocks())

    # -- task boundaries ---------------------------------------------------

    def grow_output(self, task):
        """Open a new task: append its output node, advance the task index.

        The node receives He-initialised weights from every hidden
        neuron of the last layer (hidden-to-output edges are never
        structurally masked) and a zero bias.
        """
        if task != self.task + 1:
            raise ValueError(f"tasks must be opened in order; next is {self.task + 1}")
        self.task = task
        out = self.output_layer
        fan_in = out.fan_in
        w = np.vstack([out.weights, he_normal(1, fan_in, self.rng)])
        b = np.concatenate([out.bias, [0.0]])
        conn = np.vstack([out.conn_mask, np.ones((1, fan_in))])
        train = np.vstack([out.train_mask, np.ones((1, fan_in))])
        b_train = np.concatenate([out.bias_train_mask, [1.0]])
        self.layers[-1] = MaskedLayer(w, b, conn, train, b_train, out.activation)
        self.output_gens.append(task)
        self._split_done = [set() for _ in self.hidden_layers]
        self._small_frozen = None
        return self.n_outputs - 1

    def take_snapshot(self):
        """Record hidden weights as the reference for this task's drift."""
        self.snapshot = Snapshot.of(self)
        return self.snapshot

    # -- drift and splitting -------------------------------------------------

    def semantic_drift(self, layer_index):
        """Squared L2 drift of each neuron's incoming weights and bias.

        Neurons appended after the snapshot have no reference row and
        report exactly 0.0. Columns appended after the snapshot are
        structural zeros for old neurons, so they contribute nothing.
        """
        if self.snapshot is None:
            raise ValueError("no snapshot; call take_snapshot at task start")
        layer = self.hidden_layers[layer_index]
        snap_w = self.snapshot.weights[layer_index]
        snap_b = self.snapshot.biases[layer_index]
        m0, k0 = snap_w.shape
        drift = np.zeros(layer.fan_out)
        diff = layer.weights[:m0, :k0] - snap_w
        drift[:m0] = np.sum(diff * diff, axis=1)
        drift[:m0] += (layer.bias[:m0] - snap_b) ** 2
        return drift

    def _append_hidden(self, layer_index, incoming, bias_value):
        """Append one neuron of the current generation to a hidden layer.

        ``incoming`` covers the layer's full current fan-in. Structural
        consequences downstream: old hidden neurons of the next layer
        get a masked (exact zero) column, same-generation neurons get a
        random one; pre-existing output nodes get an exactly-zero column
        that only the current task's output row may train.
        """
        g = self.task
        layer = self.hidden_layers[layer_index]
        incoming = np.asarray(incoming, dtype=np.float64)
        if incoming.shape != (layer.fan_in,):
            raise DimensionError("incoming row does not match layer fan-in")
        w = np.vstack([layer.weights, incoming[None, :]])
        b = np.concatenate([layer.bias, [float(bias_value)]])
        conn = np.vstack([layer.conn_mask, np.ones((1, layer.fan_in))])
        train = np.vstack([layer.train_mask, np.ones((1, layer.fan_in))])
        b_train = np.concatenate([layer.bias_train_mask, [1.0]])
        self.layers[layer_index] = MaskedLayer(w, b, conn, train, b_train,
                                               layer.activation)
        self.hidden_gens[layer_index].append(g)
        new_index = self.layers[layer_index].fan_out - 1

        down = self.layers[layer_index + 1]
        is_output = layer_index + 1 == len(self.layers) - 1
        down_gens = self.output_gens if is_output else self.hidden_gens[layer_index + 1]
        col_w = np.zeros((down.fan_out, 1))
        col_conn = np.zeros((down.fan_out, 1))
        col_train = np.zeros((down.fan_out, 1))
        std = np.sqrt(2.0 / max(down.fan_in + 1, 1))
        for v in range(down.fan_out):
            if is_output:
                col_conn[v, 0] = 1.0  # outputs see every hidden neuron
                if down_gens[v] == g:
                    col_w[v, 0] = self.rng.normal(0.0, std)
                    col_train[v, 0] = 1.0
                # weights toward pre-existing outputs stay exactly 0.0
            elif down_gens[v] >= g:
                col_conn[v, 0] = 1.0
                col_w[v, 0] = self.rng.normal(0.0, std)
                col_train[v, 0] = 1.0
            # older hidden neurons never see newer ones: masked column
        self.layers[layer_index + 1] = MaskedLayer(
            np.hstack([down.weights, col_w]),
            down.bias,
            np.hstack([down.conn_mask, col_conn]),
            np.hstack([down.train_mask, col_train]),
            down.bias_train_mask,
            down.activation)
        return new_index

    def split_neuron(self, layer_index, neuron_index, split_init="drifted"):
        """Split one drifted neuron: revert the original, append a copy.

        The copy belongs to the current generation and starts from the
        drifted incoming weights (``split_init="drifted"``) or from the
        snapshot row (``"reverted"``). The original gets its snapshot
        weights and bias back. Each neuron may split at most once per
        task, and only neurons that existed at the snapshot may split.
        """
        if split_init not in ("drifted", "reverted"):
            raise ValueError(f"unknown split_init {split_init!r}")
        if self.snapshot is None:
            raise ValueError("no snapshot; call take_snapshot at task start")
        snap_w = self.snapshot.weights[layer_index]
        snap_b = self.snapshot.biases[layer_index]
        if not 0 <= neuron_index < snap_w.shape[0]:
            raise ValueError(
                f"neuron {neuron_index} of layer {layer_index} is not in the snapshot")
        if neuron_index in self._split_done[layer_index]:
            raise ValueError(
                f"neuron {neuron_index} of layer {layer_index} already split this task")

        layer = self.hidden_layers[layer_index]
        k0 = snap_w.shape[1]
        drifted = layer.weights[neuron_index].copy()
        drifted_bias = float(layer.bias[neuron_index])

        if split_init == "drifted":
            incoming, bias_value = drifted, drifted_bias
        else:
            incoming = np.zeros(layer.fan_in)
            incoming[:k0] = snap_w[neuron_index]
            bias_value = float(snap_b[neuron_index])

        # revert the original before the append resizes anything
        w = layer.weights
        w[neuron_index, :k0] = snap_w[neuron_index]
        w[neuron_index, k0:] = 0.0
        layer.bias[neuron_index] = snap_b[neuron_index]

        new_index = self._append_hidden(layer_index, incoming, bias_value)
        self._split_done[layer_index].add(neuron_index)
        return (NeuronTag(layer_index, neuron_index,
                          self.hidden_gens[layer_index][neuron_index]),
                NeuronTag(layer_index, new_index, self.task))

    def ensure_support_path(self):
        """Give every hidden layer a current-generation neuron.

        Same-generation edges are always structurally present, and
        hidden-to-output edges are never masked, so once every hidden
        layer holds a generation-``g`` neuron there is a path from the
        input through generation-``g`` structure to this task's output
        node. Layers that already have one are left alone; the rest get
        a He-initialised filler.
        """
        added = []
        g = self.task
        for l in range(self.n_hidden_layers):
            if any(gen == g for gen in self.hidden_gens[l]):
                continue
            layer = self.hidden_layers[l]
            incoming = he_normal(1, layer.fan_in, self.rng)[0]
            idx = self._append_hidden(l, incoming, 0.0)
            added.append(NeuronTag(l, idx, g))
        return added

    def splitting_round(self, epoch, split_init="drifted"):
        """Measure drift everywhere, split what exceeds the threshold.

        Thresholds come from the schedule state at call time; the
        comparison is strict, so drift exactly at the threshold does not
        split. If anything split, every hidden layer is topped up with
        a support filler and the freeze masks are rebuilt for the
        current scope.
        """
        if self.schedule is None:
            raise ValueError("no drift schedule; call attach_schedule first")
        thresholds = [self.schedule.current(l) for l in range(self.n_hidden_layers)]
        report = SplitReport(task=self.task, epoch=epoch, thresholds=thresholds)
        drifts = [self.semantic_drift(l) for l in range(self.n_hidden_layers)]
        for l in range(self.n_hidden_layers):
            snap_rows = self.snapshot.weights[l].shape[0]
            for i in range(snap_rows):
                if i in self._split_done[l]:
                    continue
                if drifts[l][i] > thresholds[l]:
                    old_tag, new_tag = self.split_neuron(l, i, split_init)
                    report.splits.append(old_tag)
                    report.new_neurons.append(new_tag)
                    report.drifts.append(float(drifts[l][i]))
        if report.total_splits:
            report.fillers = self.ensure_support_path()
            self.set_structural_freeze(self.freeze_scope)
        return report

    # -- schedule ------------------------------------------------------------

    def attach_schedule(self, sigma, delta):
        self.schedule = DriftSchedule(sigma, delta, self.n_hidden_layers)
        return self.schedule

    # -- freezing ------------------------------------------------------------

    def set_structural_freeze(self, scope):
        """Rebuild every trainability mask for the given scope.

        ``full_truncated``: every structurally present weight trains;
        old tasks are shielded only by gradient truncation at the
        output layer.

        ``pss_only``: only current-generation structure trains, namely
        the incoming weights and biases of generation-``g`` hidden
        neurons and of this task's output node. Everything else is
        frozen, which (with the masked topology) keeps earlier tasks'
        logits bit-identical through further training.

        A magnitude freeze recorded by ``freeze_small_weights`` is
        re-applied on top, so rebuilding scope never unfreezes it.
        """
        if scope not in FREEZE_SCOPES:
            raise ValueError(f"unknown freeze scope {scope!r}")
        self.freeze_scope = scope
        g = self.task
        for l, layer in enumerate(self.hidden_layers):
            if scope == "full_truncated":
                layer.train_mask = layer.conn_mask.copy()
                layer.bias_train_mask = np.ones(layer.fan_out)
            else:
                rows = np.asarray([gen == g for gen in self.hidden_gens[l]],
                                  dtype=np.float64)
                layer.train_mask = layer.conn_mask * rows[:, None]
                layer.bias_train_mask = rows.copy()
        out = self.output_layer
        if scope == "full_truncated":
            out.train_mask = out.conn_mask.copy()
            out.bias_train_mask = np.ones(out.fan_out)
        else:
            rows = np.asarray([gen == g for gen in self.output_gens],
                              dtype=np.float64)
            out.train_mask = out.conn_mask * rows[:, None]
            out.bias_train_mask = rows.copy()
        self._reapply_small_frozen()
        for layer in self.layers:
            layer.validate()

    def freeze_small_weights(self, threshold):
        """Freeze weights with ``|w| < threshold`` for the rest of the task.

        Applies to weight matrices only, never biases. The frozen set is
        captured now and survives scope rebuilds; positions created
        after the capture are unaffected. A threshold of 0 freezes
        nothing, because the comparison is strict.
        """
        if threshold < 0:
            raise ValueError("threshold must be non-negative")
        self._small_frozen = [
            (np.abs(layer.weights) < threshold) & (layer.conn_mask == 1.0)
            for layer in self.layers]
        self._reapply_small_frozen()
        return sum(int(m.sum()) for m in self._small_frozen)

    def _reapply_small_frozen(self):
        if self._small_frozen is None:
            return
        for layer, small in zip(self.layers, self._small_frozen):
            m, k = small.shape
            layer.train_mask[:m, :k][small] = 0.0

    # -- invariants ------------------------------------------------------------

    def check_masks(self):
        """Audit every structural invariant; return violation strings."""
        problems = []
        for i, layer in enumerate(self.layers):
            try:
                layer.validate()
            except (MaskError, DimensionError, FloatingPointError) as e:
                problems.append(f"layer {i}: {e}")
        for l, gens in enumerate(self.hidden_gens):
            if len(gens) != self.hidden_layers[l].fan_out:
                problems.append(f"layer {l}: {len(gens)} tags for "
                                f"{self.hidden_layers[l].fan_out} neurons")
                continue
            if any(gens[i] > gens[i + 1] for i in range(len(gens) - 1)):
                problems.append(f"layer {l}: generations not non-decreasing")
        if len(self.output_gens) != self.n_outputs:
            problems.append("output generation tags do not match output count")
        if any(self.output_gens[i] >= self.output_gens[i + 1]
               for i in range(len(self.output_gens) - 1)):
            problems.append("output generations not strictly increasing")
        if problems:
            return problems

        for l in range(1, self.n_hidden_layers):
            layer = self.hidden_layers[l]
            in_gens = np.asarray(self.hidden_gens[l - 1])
            out_gens = np.asarray(self.hidden_gens[l])
            expected = (in_gens[None, :] <= out_gens[:, None]).astype(np.float64)
            if not np.array_equal(layer.conn_mask, expected):
                problems.append(
                    f"layer {l}: connectivity mask disagrees with generation rule")
        if not np.all(self.hidden_layers[0].conn_mask == 1.0):
            problems.append("layer 0: input edges must all be present")
        if not np.all(self.output_layer.conn_mask == 1.0):
            problems.append("output layer: hidden-to-output edges must all be present")
        return problems
