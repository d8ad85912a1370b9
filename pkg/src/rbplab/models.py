"""Feed-forward, Elman, GRU and LSTM sequence models over one-hot tokens.

All models read a fixed-length token context, use ReLU hidden layers (the
recurrent cells use their standard gate activations), softmax outputs, and
full-batch Adam training by default. Relation-based pattern wiring hooks in
at three places: extra inputs (variants "1n"/"1p"), extra hidden units
("2"), or a late-fusion mixture head ("3", prediction only).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .rbp import (
    DrConfig,
    Rbp3Head,
    drn_features,
    drp_features,
    drp_out_targets,
    drp_sum_matrix,
    rbp3_mix,
    rbp3_offsets,
)

ARCHITECTURES = ("ffnn", "rnn", "gru", "lstm")
RBP_VARIANTS = ("none", "1n", "1p", "2", "3")

CHECKPOINT_VERSION = 1

__all__ = [
    "ARCHITECTURES",
    "RBP_VARIANTS",
    "ConfigError",
    "VocabularyError",
    "TrainingDivergedError",
    "ModelConfig",
    "ForwardResult",
    "EpochStats",
    "TrainedModel",
    "one_hot_encode",
    "one_hot_rows",
    "build_model",
    "train",
    "evaluate",
    "save_model",
    "load_model",
]


class ConfigError(ValueError):
    """Invalid model configuration or dataset/model mismatch."""


class VocabularyError(ValueError):
    """Token index outside the model's vocabulary."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(
            f"training diverged (non-finite loss) at epoch {epoch} "
            f"with learning rate {learning_rate}")
        self.epoch = epoch
        self.learning_rate = learning_rate


@dataclass
class ModelConfig:
    """Architecture choice plus hyperparameters for one training run."""

    architecture: str
    vocab_size: int
    context_length: int
    output_size: int
    hidden_size: int = 50
    hidden_layers: int = 1
    learning_rate: float = 0.1
    dropout: float = 0.1
    epochs: int = 10
    rbp: str = "none"
    seed: int = 0
    head_hidden: int = 10
    batch_size: int | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.rbp not in RBP_VARIANTS:
            raise ConfigError(f"unknown rbp variant {self.rbp!r}")
        if self.vocab_size < 1 or self.context_length < 1 or self.output_size < 1:
            raise ConfigError("vocab_size, context_length and output_size must be positive")
        if self.hidden_size < 1 or self.hidden_layers < 1:
            raise ConfigError("hidden_size and hidden_layers must be positive")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.rbp != "none" and self.context_length < 2:
            raise ConfigError("rbp variants need a context of at least 2 tokens")
        if self.rbp == "3":
            if self.output_size != self.vocab_size:
                raise ConfigError("rbp variant 3 is a prediction head; output_size must equal vocab_size")
            if self.architecture == "ffnn":
                raise ConfigError("rbp variant 3 is wired for the recurrent architectures")

    @property
    def dr(self) -> DrConfig:
        return DrConfig(self.vocab_size, self.context_length)


@dataclass
class ForwardResult:
    probs: ad.Tensor
    head_estimates: ad.Tensor | None = None
    head_targets: np.ndarray | None = None
    step_states: list[np.ndarray] | None = None


@dataclass(frozen=True)
class EpochStats:
    loss: float
    accuracy: float


@dataclass
class TrainedModel:
    config: ModelConfig
    model: "_ModelBase"
    history: list[EpochStats] = field(default_factory=list)


def one_hot_encode(index: int, vocab_size: int) -> np.ndarray:
    """One-hot vector of length ``vocab_size`` with a 1 at ``index``."""
    if not 0 <= index < vocab_size:
        raise VocabularyError(f"token index {index} outside vocabulary of size {vocab_size}")
    v = np.zeros(vocab_size)
    v[index] = 1.0
    return v


def one_hot_rows(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    return np.eye(vocab_size, dtype=np.float64)[np.asarray(tokens)]


class _ModelBase:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.dr = config.dr
        self.params: dict[str, ad.Parameter] = {}
        self.head: Rbp3Head | None = None
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self._build(rng)
        if config.rbp in ("2", "3"):
            self.params["drp_sum"] = ad.Parameter(
                drp_sum_matrix(config.vocab_size, self.dr.pair_count), trainable=False)
        if config.rbp == "3":
            self.head = Rbp3Head.create(self.dr, config.head_hidden, rng)
            for name, p in zip(("head_w1", "head_b1", "head_w2", "head_b2",
                                "mix_gate_base", "mix_gate_offset"), self.head.parameters()):
                self.params[name] = p

    def _build(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def _weight(self, name: str, shape: tuple[int, int], rng, fan_in: int) -> ad.Parameter:
        # symmetric uniform scaled by fan-in, deterministic under the run seed
        s = 1.0 / math.sqrt(fan_in)
        p = ad.Parameter(rng.uniform(-s, s, size=shape))
        self.params[name] = p
        return p

    def _bias(self, name: str, size: int, value: float = 0.0) -> ad.Parameter:
        p = ad.Parameter(np.full(size, value))
        self.params[name] = p
        return p

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.config.context_length:
            raise ConfigError(
                f"expected token sequences of length {self.config.context_length}, "
                f"got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabularyError(
                f"token index outside vocabulary of size {self.config.vocab_size}")
        return tokens

    def _dropout(self, x: ad.Tensor, train: bool, rng) -> ad.Tensor:
        rate = self.config.dropout
        if not train or rate == 0.0:
            return x
        if rng is None:
            raise ConfigError("training forward with dropout needs an rng")
        return ad.dropout_mask_apply(x, ad.make_dropout_mask(x.shape, rate, rng))

    def _drp_tensor(self, tokens: np.ndarray) -> ad.Tensor:
        """Full-context DRp values through the fixed +1 summing connections."""
        drn = ad.Tensor(drn_features(tokens, self.config.vocab_size))
        return ad.matmul(drn, self.params["drp_sum"])

    def _readout(self, hidden: ad.Tensor) -> ad.Tensor:
        logits = ad.add(ad.matmul(hidden, self.params["w_out"]), self.params["b_out"])
        return ad.softmax(logits)

    def _late_fusion(self, base: ad.Tensor, drp: ad.Tensor, tokens: np.ndarray,
                     train: bool, teacher_targets) -> ForwardResult:
        estimates = self.head.forward(drp)
        if train:
            if teacher_targets is None:
                raise ConfigError("training the late-fusion head needs the true next tokens")
            targets = drp_out_targets(tokens, teacher_targets)
            source = targets
        else:
            targets = None
            source = estimates.data
        offsets = rbp3_offsets(source, tokens, self.config.vocab_size)
        probs = rbp3_mix(base, offsets, self.head)
        return ForwardResult(probs, estimates, targets)

    def forward(self, tokens, *, train: bool = False, rng=None,
                teacher_targets=None, collect_states: bool = False) -> ForwardResult:
        raise NotImplementedError


class FeedForwardModel(_ModelBase):
    def _build(self, rng):
        cfg = self.config
        in_dim = cfg.context_length * cfg.vocab_size
        if cfg.rbp == "1n":
            in_dim += self.dr.drn_count
        elif cfg.rbp == "1p":
            in_dim += self.dr.drp_count
        cur = in_dim
        for layer in range(cfg.hidden_layers):
            self._weight(f"w{layer}", (cur, cfg.hidden_size), rng, cur)
            self._bias(f"b{layer}", cfg.hidden_size)
            cur = cfg.hidden_size
            if layer == 0 and cfg.rbp == "2":
                cur += self.dr.drp_count
        self._weight("w_out", (cur, cfg.output_size), rng, cur)
        self._bias("b_out", cfg.output_size)

    def forward(self, tokens, *, train=False, rng=None, teacher_targets=None,
                collect_states=False):
        cfg = self.config
        tokens = self._check_tokens(tokens)
        batch = tokens.shape[0]
        x_np = one_hot_rows(tokens, cfg.vocab_size).reshape(batch, -1)
        if cfg.rbp == "1n":
            x_np = np.concatenate([x_np, drn_features(tokens, cfg.vocab_size)], axis=1)
        elif cfg.rbp == "1p":
            x_np = np.concatenate([x_np, drp_features(tokens)], axis=1)
        h = ad.Tensor(x_np)
        for layer in range(cfg.hidden_layers):
            pre = ad.add(ad.matmul(h, self.params[f"w{layer}"]), self.params[f"b{layer}"])
            h = self._dropout(ad.relu(pre), train, rng)
            if layer == 0 and cfg.rbp == "2":
                h = ad.concat((h, self._drp_tensor(tokens)))
        return ForwardResult(self._readout(h))


class _RecurrentBase(_ModelBase):
    def _input_dim(self) -> int:
        cfg = self.config
        if cfg.rbp == "1n":
            return cfg.vocab_size + self.dr.drn_count
        if cfg.rbp == "1p":
            return cfg.vocab_size + self.dr.drp_count
        return cfg.vocab_size

    def _build(self, rng):
        cfg = self.config
        x_dim = self._input_dim()
        for layer in range(cfg.hidden_layers):
            self._build_cell(layer, x_dim if layer == 0 else cfg.hidden_size,
                             cfg.hidden_size, rng)
        readout_dim = cfg.hidden_size
        if cfg.rbp in ("2", "3"):
            readout_dim += self.dr.drp_count
        self._weight("w_out", (readout_dim, cfg.output_size), rng, readout_dim)
        self._bias("b_out", cfg.output_size)

    def _build_cell(self, layer, x_dim, hidden, rng):
        raise NotImplementedError

    def _init_state(self, batch: int):
        raise NotImplementedError

    def _cell(self, layer, x: ad.Tensor, state):
        raise NotImplementedError

    def _state_hidden(self, state) -> ad.Tensor:
        return state

    def forward(self, tokens, *, train=False, rng=None, teacher_targets=None,
                collect_states=False):
        cfg = self.config
        tokens = self._check_tokens(tokens)
        batch, n = tokens.shape
        states = [self._init_state(batch) for _ in range(cfg.hidden_layers)]
        step_states: list[np.ndarray] | None = [] if collect_states else None
        top = None
        for t in range(n):
            x_np = one_hot_rows(tokens[:, t], cfg.vocab_size)
            if cfg.rbp == "1n":
                x_np = np.concatenate(
                    [x_np, drn_features(tokens, cfg.vocab_size, visible=t + 1)], axis=1)
            elif cfg.rbp == "1p":
                x_np = np.concatenate([x_np, drp_features(tokens, visible=t + 1)], axis=1)
            inp = ad.Tensor(x_np)
            for layer in range(cfg.hidden_layers):
                states[layer] = self._cell(layer, inp, states[layer])
                inp = self._dropout(self._state_hidden(states[layer]), train, rng)
            top = inp
            if collect_states:
                step_states.append(self._state_hidden(states[-1]).data.copy())
        readout = top
        drp = None
        if cfg.rbp in ("2", "3"):
            drp = self._drp_tensor(tokens)
            readout = ad.concat((readout, drp))
        base = self._readout(readout)
        if cfg.rbp == "3":
            result = self._late_fusion(base, drp, tokens, train, teacher_targets)
        else:
            result = ForwardResult(base)
        result.step_states = step_states
        return result


class ElmanModel(_RecurrentBase):
    """Simple recurrent network with ReLU hidden units."""

    def _build_cell(self, layer, x_dim, hidden, rng):
        self._weight(f"w_x{layer}", (x_dim, hidden), rng, x_dim)
        self._weight(f"w_h{layer}", (hidden, hidden), rng, hidden)
        self._bias(f"b_h{layer}", hidden)

    def _init_state(self, batch):
        return ad.Tensor(np.zeros((batch, self.config.hidden_size)))

    def _cell(self, layer, x, h):
        pre = ad.add(ad.add(ad.matmul(x, self.params[f"w_x{layer}"]),
                            ad.matmul(h, self.params[f"w_h{layer}"])),
                     self.params[f"b_h{layer}"])
        return ad.relu(pre)


class GruModel(_RecurrentBase):
    """Gated recurrent unit: update/reset gates, candidate state."""

    GATES = ("z", "r", "n")

    def _build_cell(self, layer, x_dim, hidden, rng):
        for gate in self.GATES:
            self._weight(f"w_x{gate}{layer}", (x_dim, hidden), rng, x_dim)
            self._weight(f"w_h{gate}{layer}", (hidden, hidden), rng, hidden)
            self._bias(f"b_{gate}{layer}", hidden)

    def _init_state(self, batch):
        return ad.Tensor(np.zeros((batch, self.config.hidden_size)))

    def _gate(self, name, layer, x, h):
        return ad.add(ad.add(ad.matmul(x, self.params[f"w_x{name}{layer}"]),
                             ad.matmul(h, self.params[f"w_h{name}{layer}"])),
                      self.params[f"b_{name}{layer}"])

    def _cell(self, layer, x, h):
        z = ad.sigmoid(self._gate("z", layer, x, h))
        r = ad.sigmoid(self._gate("r", layer, x, h))
        cand = ad.tanh(ad.add(ad.add(ad.matmul(x, self.params[f"w_xn{layer}"]),
                                     ad.matmul(ad.mul(r, h), self.params[f"w_hn{layer}"])),
                              self.params[f"b_n{layer}"]))
        # h' = z*h + (1-z)*candidate
        return ad.add(ad.mul(z, h), ad.mul(ad.scalar_scale(z, -1.0, 1.0), cand))


class LstmModel(_RecurrentBase):
    """LSTM with forget-gate bias initialized to 1."""

    GATES = ("i", "f", "g", "o")

    def _build_cell(self, layer, x_dim, hidden, rng):
        for gate in self.GATES:
            self._weight(f"w_x{gate}{layer}", (x_dim, hidden), rng, x_dim)
            self._weight(f"w_h{gate}{layer}", (hidden, hidden), rng, hidden)
            self._bias(f"b_{gate}{layer}", hidden, value=1.0 if gate == "f" else 0.0)

    def _init_state(self, batch):
        zeros = np.zeros((batch, self.config.hidden_size))
        return ad.Tensor(zeros), ad.Tensor(zeros.copy())

    def _state_hidden(self, state):
        return state[0]

    def _gate(self, name, layer, x, h):
        return ad.add(ad.add(ad.matmul(x, self.params[f"w_x{name}{layer}"]),
                             ad.matmul(h, self.params[f"w_h{name}{layer}"])),
                      self.params[f"b_{name}{layer}"])

    def _cell(self, layer, x, state):
        h, c = state
        i = ad.sigmoid(self._gate("i", layer, x, h))
        f = ad.sigmoid(self._gate("f", layer, x, h))
        g = ad.tanh(self._gate("g", layer, x, h))
        o = ad.sigmoid(self._gate("o", layer, x, h))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new


_MODEL_CLASSES = {
    "ffnn": FeedForwardModel,
    "rnn": ElmanModel,
    "gru": GruModel,
    "lstm": LstmModel,
}


def build_model(config: ModelConfig, rng: np.random.Generator | None = None) -> _ModelBase:
    return _MODEL_CLASSES[config.architecture](config, rng)


# ---------------------------------------------------------------------------
# training and evaluation


def _iter_batches(tokens, targets, batch_size, rng):
    n = len(tokens)
    if batch_size is None or batch_size >= n:
        yield tokens, targets
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield tokens[sel], targets[sel]


def _accuracy(model: _ModelBase, tokens, targets) -> float:
    probs = model.forward(tokens).probs.data
    return float(np.mean(np.argmax(probs, axis=1) == targets))


def train(config: ModelConfig, tokens, targets, *, model: _ModelBase | None = None) -> TrainedModel:
    """Train a model on (context, target) index arrays.

    Full-batch updates unless config.batch_size is set; deterministic under
    (seed, config, data). Raises TrainingDivergedError on a non-finite loss.
    """
    tokens = np.asarray(tokens)
    targets = np.asarray(targets, dtype=np.int64)
    if tokens.ndim != 2 or len(tokens) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if len(targets) != len(tokens):
        raise ConfigError(f"{len(tokens)} sequences but {len(targets)} targets")
    if targets.min() < 0 or targets.max() >= config.output_size:
        raise VocabularyError(f"target outside output range of size {config.output_size}")

    rng = np.random.default_rng(config.seed)
    if model is None:
        model = build_model(config, rng)
    params = model.parameters()
    hyper = ad.AdamHyper(config.learning_rate)
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        losses = []
        for bt, by in _iter_batches(tokens, targets, config.batch_size, rng):
            result = model.forward(bt, train=True, rng=rng, teacher_targets=by)
            loss = ad.cross_entropy(result.probs, by)
            if result.head_estimates is not None and result.head_targets is not None:
                loss = ad.add(loss, ad.mse(result.head_estimates, result.head_targets))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, config.learning_rate)
            losses.append(value)
            ad.zero_grads(params)
            loss.backward()
            ad.adam_step(params, hyper)
        history.append(EpochStats(float(np.mean(losses)), _accuracy(model, tokens, targets)))
    return TrainedModel(config, model, history)


def evaluate(trained: TrainedModel | _ModelBase, tokens, targets, metric: str = "accuracy") -> float:
    """Accuracy (argmax match rate) or mean cross-entropy on a dataset."""
    model = trained.model if isinstance(trained, TrainedModel) else trained
    tokens = np.asarray(tokens)
    targets = np.asarray(targets, dtype=np.int64)
    if len(tokens) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    probs = model.forward(tokens).probs.data
    if metric == "accuracy":
        return float(np.mean(np.argmax(probs, axis=1) == targets))
    if metric == "cross_entropy":
        picked = probs[np.arange(len(targets)), targets]
        return float(np.mean(-np.log(picked + ad.LOG_FLOOR)))
    raise ValueError(f"unknown metric {metric!r}; use 'accuracy' or 'cross_entropy'")


# ---------------------------------------------------------------------------
# checkpoints


def save_model(trained: TrainedModel, path) -> None:
    """Versioned JSON checkpoint: config, parameters, training history."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(trained.config),
        "history": [[h.loss, h.accuracy] for h in trained.history],
        "params": {
            name: {
                "shape": list(p.shape),
                "values": p.values.tolist(),
                "trainable": p.trainable,
            }
            for name, p in trained.model.params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_model(path) -> TrainedModel:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig(**payload["config"])
    model = build_model(config)
    stored = payload["params"]
    if set(stored) != set(model.params):
        raise ConfigError("checkpoint parameters do not match the configured architecture")
    for name, p in model.params.items():
        entry = stored[name]
        data = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if data.shape != p.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}")
        if bool(entry["trainable"]) != p.trainable:
            raise ConfigError(f"checkpoint trainable flag mismatch for {name}")
        p.data = data
    history = [EpochStats(loss, acc) for loss, acc in payload["history"]]
    return TrainedModel(config, model, history)


# ---------------------------------------------------------------------------
# registered gradient-check graphs over the production forward paths


def _loss_fn(model, tokens, targets, teacher=None):
    # teacher-forced path keeps the offsets constant, matching the analytic graph
    def fn():
        result = model.forward(tokens, train=teacher is not None, teacher_targets=teacher)
        loss = ad.cross_entropy(result.probs, targets)
        if result.head_estimates is not None and result.head_targets is not None:
            loss = ad.add(loss, ad.mse(result.head_estimates, result.head_targets))
        return loss
    return fn


def _tiny_config(arch, rbp="none", out=2, k=5, n=3):
    return ModelConfig(architecture=arch, vocab_size=k, context_length=n,
                       output_size=out, hidden_size=6, hidden_layers=2,
                       dropout=0.0, head_hidden=4, seed=0, rbp=rbp)


@ad.register_gradcheck_graph("ffnn_two_layer_relu")
def _gc_ffnn(rng):
    model = build_model(_tiny_config("ffnn"), rng)
    tokens = rng.integers(0, 5, size=(4, 3))
    targets = rng.integers(0, 2, size=4)
    return _loss_fn(model, tokens, targets), model.parameters()


@ad.register_gradcheck_graph("ffnn_mid_fusion")
def _gc_ffnn_rbp2(rng):
    model = build_model(_tiny_config("ffnn", rbp="2"), rng)
    tokens = rng.integers(0, 5, size=(4, 3))
    targets = rng.integers(0, 2, size=4)
    return _loss_fn(model, tokens, targets), model.parameters()


@ad.register_gradcheck_graph("rnn_unrolled_3")
def _gc_rnn(rng):
    model = build_model(_tiny_config("rnn"), rng)
    tokens = rng.integers(0, 5, size=(4, 3))
    targets = rng.integers(0, 2, size=4)
    return _loss_fn(model, tokens, targets), model.parameters()


@ad.register_gradcheck_graph("gru_unrolled_3")
def _gc_gru(rng):
    model = build_model(_tiny_config("gru"), rng)
    tokens = rng.integers(0, 5, size=(4, 3))
    targets = rng.integers(0, 2, size=4)
    return _loss_fn(model, tokens, targets), model.parameters()


@ad.register_gradcheck_graph("lstm_unrolled_3")
def _gc_lstm(rng):
    model = build_model(_tiny_config("lstm"), rng)
    tokens = rng.integers(0, 5, size=(4, 3))
    targets = rng.integers(0, 2, size=4)
    return _loss_fn(model, tokens, targets), model.parameters()


@ad.register_gradcheck_graph("gru_late_fusion_teacher_forced")
def _gc_rbp3(rng):
    config = _tiny_config("gru", rbp="3", out=5, n=2)
    model = build_model(config, rng)
    tokens = rng.integers(0, 5, size=(4, 2))
    targets = rng.integers(0, 5, size=4)
    return _loss_fn(model, tokens, targets, teacher=targets), model.parameters()
