"""Split vertical-federated-learning protocol simulator.

Parties are explicit state machines wired to an in-process message bus that
enforces the round contract: every training round is (one representation
upload per passive feature party) -> (one aggregation at the active party)
-> (one gradient download per passive party) -> (one model broadcast).
Inference rounds stop after aggregation. The bus is ordered and lossless;
any other sequence is a protocol error.

Privacy boundaries hold by construction: passive party objects have no
label field, the active party object has no raw-feature fields for other
parties; only representations and gradients cross the bus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import PartitionedDataset
from .seeds import stream

REPR_UPLOAD = "repr_upload"
GRAD_DOWNLOAD = "grad_download"
MODEL_BROADCAST = "model_broadcast"

ALL_PARTIES = 0  # broadcast receiver


class ProtocolError(RuntimeError):
    """Message sequence violated the round contract."""


class NumericError(RuntimeError):
    """Training diverged; carries the 1-based round index."""

    def __init__(self, msg: str, round_no: int):
        super().__init__(f"{msg} (round {round_no})")
        self.round_no = round_no


class UnsupportedOperationError(RuntimeError):
    """Asked for something the protocol deliberately does not support."""


@dataclass(frozen=True)
class PartyId:
    index: int
    role: str  # "passive" or "active"


@dataclass(frozen=True)
class Topology:
    """Who holds what. Feature parties are 1..F and hold one slice each.

    By default the active party is an extra label-only coordinator with
    index F + 1 and no features; with active_holds_features the last
    feature party (index F) doubles as the active party.
    """

    num_feature_parties: int
    active_holds_features: bool = False

    def __post_init__(self):
        if self.num_feature_parties < 1:
            raise ValueError("need at least one feature party")

    @property
    def num_parties(self) -> int:
        return self.num_feature_parties + (0 if self.active_holds_features else 1)

    @property
    def active_index(self) -> int:
        return self.num_parties

    @property
    def feature_parties(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_feature_parties + 1))

    @property
    def passive_parties(self) -> tuple[int, ...]:
        return tuple(k for k in range(1, self.num_parties) if k != self.active_index)

    def party(self, index: int) -> PartyId:
        if not 1 <= index <= self.num_parties:
            raise ValueError(f"no party {index} in a {self.num_parties}-party topology")
        return PartyId(index, "active" if index == self.active_index else "passive")


@dataclass(frozen=True)
class RoundMessage:
    kind: str
    sender: int
    receiver: int
    round_no: int
    payload: object = None


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the collaborative model."""

    encoder: str = "mlp"  # "mlp" or "cnn"
    encoder_hidden: tuple[int, ...] = (32,)
    hidden_dim: int = 16  # representation width per party (mlp encoders)
    conv_channels: tuple[int, int] = (32, 64)
    top_hidden: tuple[int, ...] = (128,)

    def __post_init__(self):
        if self.encoder not in ("mlp", "cnn"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        if self.encoder == "mlp" and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")


def _build_encoder(spec: ModelSpec, height: int, width: int,
                   rng: np.random.Generator) -> nn.Network:
    if spec.encoder == "cnn":
        return nn.conv_encoder((1, height, width), spec.conv_channels, rng)
    dims = [height * width, *spec.encoder_hidden, spec.hidden_dim]
    return nn.mlp_network(dims, rng)


@dataclass
class VflModel:
    """All networks of one collaborative model, as a single value.

    The flat parameter vector concatenates bottoms in ascending party order
    and the top model last; component_bounds exposes each block's span.
    """

    topology: Topology
    bottoms: dict[int, nn.Network]
    top: nn.Network
    num_classes: int

    @property
    def participating(self) -> tuple[int, ...]:
        return tuple(sorted(self.bottoms))

    @property
    def hidden_dims(self) -> dict[int, int]:
        return {k: net.out_dim for k, net in self.bottoms.items()}

    def component_bounds(self) -> dict[str, tuple[int, int]]:
        bounds = {}
        pos = 0
        for k in self.participating:
            n = self.bottoms[k].param_count()
            bounds[f"bottom:{k}"] = (pos, pos + n)
            pos += n
        bounds["top"] = (pos, pos + self.top.param_count())
        return bounds

    def param_count(self) -> int:
        return sum(net.param_count() for net in self.bottoms.values()) + self.top.param_count()

    def flat_params(self) -> np.ndarray:
        pieces = [self.bottoms[k].flat_params() for k in self.participating]
        pieces.append(self.top.flat_params())
        return np.concatenate(pieces)

    def set_flat_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=nn.DTYPE)
        if vec.shape != (self.param_count(),):
            raise nn.DimensionError(
                f"expected {self.param_count()} params, got shape {vec.shape}")
        for name, (lo, hi) in self.component_bounds().items():
            net = self.top if name == "top" else self.bottoms[int(name.split(":")[1])]
            net.set_flat_params(vec[lo:hi])

    def clone(self) -> "VflModel":
        return VflModel(self.topology,
                        {k: net.clone() for k, net in self.bottoms.items()},
                        self.top.clone(), self.num_classes)


def build_model(data: PartitionedDataset, topology: Topology, spec: ModelSpec,
                seed: int, participating: tuple[int, ...] | None = None) -> VflModel:
    """Fresh collaborative model with per-component named init streams."""
    if participating is None:
        participating = topology.feature_parties
    participating = tuple(sorted(participating))
    unknown = set(participating) - set(topology.feature_parties)
    if unknown:
        raise ValueError(f"parties {sorted(unknown)} are not feature parties")
    if not participating:
        raise ValueError("at least one feature party must participate")
    bottoms = {}
    for k in participating:
        if k not in data.slices:
            raise ValueError(f"dataset has no slice for party {k}")
        bottoms[k] = _build_encoder(spec, data.height, data.width(k),
                                    stream(seed, f"init/bottom{k}"))
    concat = sum(net.out_dim for net in bottoms.values())
    top = nn.mlp_network([concat, *spec.top_hidden, data.num_classes],
                         stream(seed, "init/top"))
    return VflModel(topology, bottoms, top, data.num_classes)


class MessageBus:
    """Ordered, lossless queue that validates the lock-step round contract."""

    def __init__(self, uploaders: tuple[int, ...], active_index: int):
        self.uploaders = tuple(sorted(uploaders))
        self.active_index = active_index
        self.log: list[RoundMessage] = []
        self._round = 0
        self._phase = "idle"
        self._kind = "train"
        self._seen_uploads: set[int] = set()
        self._seen_grads: set[int] = set()

    def begin_round(self, round_no: int, kind: str = "train") -> None:
        if self._phase != "idle":
            raise ProtocolError(f"round {self._round} still open in phase {self._phase}")
        if round_no != self._round + 1:
            raise ProtocolError(f"expected round {self._round + 1}, got {round_no}")
        self._round = round_no
        self._kind = kind
        self._phase = "collect"
        self._seen_uploads = set()
        self._seen_grads = set()

    def post(self, msg: RoundMessage) -> RoundMessage:
        if msg.round_no != self._round:
            raise ProtocolError(f"message for round {msg.round_no} during round {self._round}")
        if msg.kind == REPR_UPLOAD:
            if self._phase != "collect":
                raise ProtocolError(f"{REPR_UPLOAD} in phase {self._phase}")
            if msg.sender not in self.uploaders:
                raise ProtocolError(f"unexpected uploader {msg.sender}")
            if msg.sender in self._seen_uploads:
                raise ProtocolError(f"duplicate {REPR_UPLOAD} from party {msg.sender}")
            if msg.receiver != self.active_index:
                raise ProtocolError("representations go to the active party")
            self._seen_uploads.add(msg.sender)
        elif msg.kind == GRAD_DOWNLOAD:
            if self._kind != "train":
                raise ProtocolError("gradient download in an inference round")
            if self._phase != "aggregated":
                raise ProtocolError(f"{GRAD_DOWNLOAD} in phase {self._phase}")
            if msg.sender != self.active_index:
                raise ProtocolError("only the active party downloads gradients")
            if msg.receiver not in self.uploaders:
                raise ProtocolError(f"gradient for non-uploading party {msg.receiver}")
            if msg.receiver in self._seen_grads:
                raise ProtocolError(f"duplicate {GRAD_DOWNLOAD} to party {msg.receiver}")
            self._seen_grads.add(msg.receiver)
        elif msg.kind == MODEL_BROADCAST:
            if self._kind != "train":
                raise ProtocolError("model broadcast in an inference round")
            if self._phase != "aggregated" or self._seen_grads != set(self.uploaders):
                raise ProtocolError("broadcast before all gradient downloads")
            self._phase = "broadcast"
        else:
            raise ProtocolError(f"unknown message kind {msg.kind!r}")
        self.log.append(msg)
        return msg

    def mark_aggregated(self) -> None:
        if self._phase != "collect":
            raise ProtocolError(f"aggregate in phase {self._phase}")
        missing = set(self.uploaders) - self._seen_uploads
        if missing:
            raise ProtocolError(f"missing {REPR_UPLOAD} from parties {sorted(missing)}")
        self._phase = "aggregated"

    def end_round(self) -> None:
        if self._kind == "train":
            if self._phase != "broadcast":
                raise ProtocolError("training round ended before the model broadcast")
        else:
            if self._phase != "aggregated":
                raise ProtocolError("inference round ended before aggregation")
        self._phase = "idle"

    def round_messages(self, round_no: int) -> list[RoundMessage]:
        return [m for m in self.log if m.round_no == round_no]


class PassiveParty:
    """Feature holder: one slice, one encoder, no labels anywhere."""

    def __init__(self, pid: PartyId, features: np.ndarray, encoder: nn.Network,
                 active_index: int):
        self.pid = pid
        self.features = features  # (N, d_k) flat, read-only upstream
        self.encoder = encoder
        self.active_index = active_index
        self._last_round = 0

    def local_forward(self, indices: np.ndarray, round_no: int) -> RoundMessage:
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.features.shape[0]):
            raise ValueError(f"party {self.pid.index}: sample index out of range")
        h = self.encoder.forward(self.features[idx])
        self._last_round = round_no
        return RoundMessage(REPR_UPLOAD, self.pid.index, self.active_index, round_no, h)

    def local_backward(self, d_repr: np.ndarray) -> np.ndarray:
        """Parameter gradients for this party's encoder given an upstream
        gradient on its uploaded representation. Replayable: the cached
        forward is not consumed."""
        flat, _ = self.encoder.backward(d_repr)
        return flat


class ActiveParty:
    """Label holder: aggregates uploads, runs the top model, owns the loss."""

    def __init__(self, pid: PartyId, labels: np.ndarray, top: nn.Network,
                 hidden_dims: dict[int, int], own_encoder: nn.Network | None = None,
                 own_features: np.ndarray | None = None):
        self.pid = pid
        self.labels = labels
        self.top = top
        self.hidden_dims = dict(sorted(hidden_dims.items()))
        self.own_encoder = own_encoder
        self.own_features = own_features
        self._last_round = 0
        self._last_logits: np.ndarray | None = None

    def aggregate_and_predict(self, messages: list[RoundMessage], round_no: int,
                              indices: np.ndarray | None = None) -> np.ndarray:
        """Concatenate representations in party-index order and run the top.

        Arrival order of messages is irrelevant; duplicates or gaps raise.
        """
        by_sender: dict[int, np.ndarray] = {}
        for m in messages:
            if m.kind != REPR_UPLOAD:
                raise ProtocolError(f"aggregate got a {m.kind} message")
            if m.round_no != round_no:
                raise ProtocolError(f"stale round: message {m.round_no}, aggregating {round_no}")
            if m.sender in by_sender:
                raise ProtocolError(f"duplicate representation from party {m.sender}")
            by_sender[m.sender] = m.payload
        expected = set(self.hidden_dims) - ({self.pid.index} if self.own_encoder else set())
        missing = expected - set(by_sender)
        if missing:
            raise ProtocolError(f"missing representation from parties {sorted(missing)}")
        extra = set(by_sender) - expected
        if extra:
            raise ProtocolError(f"representation from unexpected parties {sorted(extra)}")
        if self.own_encoder is not None:
            by_sender[self.pid.index] = self.own_encoder.forward(self.own_features[indices])
        parts = []
        for k, want in self.hidden_dims.items():
            h = by_sender[k]
            if h.shape[1] != want:
                raise nn.DimensionError(
                    f"party {k} uploaded width {h.shape[1]}, expected {want}")
            parts.append(h)
        sizes = {p.shape[0] for p in parts}
        if len(sizes) != 1:
            raise ProtocolError(f"parties disagree on batch size: {sorted(sizes)}")
        logits = self.top.forward(np.concatenate(parts, axis=1))
        self._last_round = round_no
        self._last_logits = logits
        return logits

    def loss_grad(self, logits: np.ndarray, indices: np.ndarray) -> tuple[float, np.ndarray]:
        return nn.loss_softmax_ce(logits, self.labels[np.asarray(indices)])

    def backprop_round(self, logits: np.ndarray, labels: np.ndarray,
                       round_no: int) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Cross-entropy backward through the top model.

        Returns (flat top-parameter grads, per-party gradient slice w.r.t.
        that party's uploaded representation).
        """
        _, dlogits = nn.loss_softmax_ce(logits, labels)
        return self.backprop_upstream(dlogits, round_no, logits)

    def backprop_upstream(self, dlogits: np.ndarray, round_no: int,
                          logits: np.ndarray | None = None
                          ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        if round_no != self._last_round or (logits is not None and
                                            logits is not self._last_logits):
            raise ProtocolError(f"stale round: backprop for {round_no}, "
                                f"last aggregation was {self._last_round}")
        top_flat, dconcat = self.top.backward(dlogits)
        slices = {}
        pos = 0
        for k, width in self.hidden_dims.items():
            slices[k] = dconcat[:, pos:pos + width]
            pos += width
        return top_flat, slices


class SplitVfl:
    """One collaborative session: wires parties to a bus for lock-step rounds.

    In-process, the broadcast step refreshes party-held networks by aliasing
    (parties share the model's network objects); the broadcast message still
    crosses the bus so the traffic pattern is faithful.
    """

    def __init__(self, model: VflModel, data: PartitionedDataset):
        topo = model.topology
        self.model = model
        self.data = data
        own = topo.active_index if topo.active_holds_features else None
        self.passive_parties: dict[int, PassiveParty] = {}
        for k in model.participating:
            if k == own:
                continue
            self.passive_parties[k] = PassiveParty(
                topo.party(k), data.features_flat(k), model.bottoms[k], topo.active_index)
        self.active = ActiveParty(
            topo.party(topo.active_index), data.labels, model.top, model.hidden_dims,
            own_encoder=model.bottoms.get(own) if own else None,
            own_features=data.features_flat(own) if own and own in model.bottoms else None)
        self.bus = MessageBus(tuple(self.passive_parties), topo.active_index)
        self.round_no = 0
        self.last_reprs: dict[int, np.ndarray] = {}
        self._indices: np.ndarray | None = None

    def forward_round(self, indices, kind: str = "train") -> np.ndarray:
        self.round_no += 1
        idx = np.asarray(indices)
        self.bus.begin_round(self.round_no, kind)
        msgs = [self.bus.post(p.local_forward(idx, self.round_no))
                for p in self.passive_parties.values()]
        logits = self.active.aggregate_and_predict(msgs, self.round_no, idx)
        self.bus.mark_aggregated()
        self.last_reprs = {m.sender: m.payload for m in msgs}
        self._indices = idx
        return logits

    def loss_grad(self, logits: np.ndarray) -> tuple[float, np.ndarray]:
        return self.active.loss_grad(logits, self._indices)

    def backward_round(self, dlogits: np.ndarray) -> np.ndarray:
        """Distribute representation gradients and assemble the full flat
        parameter gradient (bottoms ascending, then top)."""
        top_flat, repr_grads = self.active.backprop_upstream(dlogits, self.round_no)
        flats = {}
        for k, party in self.passive_parties.items():
            self.bus.post(RoundMessage(GRAD_DOWNLOAD, self.active.pid.index, k,
                                       self.round_no, repr_grads[k]))
            flats[k] = party.local_backward(repr_grads[k])
        if self.active.own_encoder is not None:
            own = self.active.pid.index
            flats[own], _ = self.active.own_encoder.backward(repr_grads[own])
        pieces = [flats[k] for k in self.model.participating]
        pieces.append(top_flat)
        return np.concatenate(pieces)

    def apply_update(self, grad: np.ndarray, lr: float) -> None:
        """Centralized SGD step, then broadcast the refreshed model."""
        grad = np.asarray(grad, dtype=nn.DTYPE)
        if grad.shape != (self.model.param_count(),):
            raise nn.DimensionError(
                f"expected {self.model.param_count()} grads, got shape {grad.shape}")
        for name, (lo, hi) in self.model.component_bounds().items():
            net = self.model.top if name == "top" else \
                self.model.bottoms[int(name.split(":")[1])]
            nn.sgd_step(net, grad[lo:hi], lr)
        self.bus.post(RoundMessage(MODEL_BROADCAST, self.active.pid.index, ALL_PARTIES,
                                   self.round_no))
        self.bus.end_round()

    def end_inference_round(self) -> None:
        self.bus.end_round()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    seed: int
    participating: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ValueError("lr must be finite and >= 0")


def train_model(model: VflModel, data: PartitionedDataset, cfg: TrainConfig,
                shuffle_label: str = "shuffle") -> list[float]:
    """SGD over shuffled mini-batches through the full protocol.

    Mutates the model in place; returns per-epoch mean losses.
    """
    sim = SplitVfl(model, data)
    shuffle_rng = stream(cfg.seed, shuffle_label)
    n = data.num_samples
    epoch_losses = []
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits = sim.forward_round(idx)
            loss, dlogits = sim.loss_grad(logits)
            if not np.isfinite(loss):
                raise NumericError("training loss diverged", sim.round_no)
            grad = sim.backward_round(dlogits)
            sim.apply_update(grad, cfg.lr)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses


def vfl_pretrain(data: PartitionedDataset, cfg: TrainConfig, topology: Topology,
                 spec: ModelSpec) -> VflModel:
    """Initialize and collaboratively train a fresh model."""
    model = build_model(data, topology, spec, cfg.seed, cfg.participating)
    model.loss_trace = train_model(model, data, cfg)
    return model


def retrain_gold(data: PartitionedDataset, cfg: TrainConfig, topology: Topology,
                 spec: ModelSpec, drop_party: int) -> VflModel:
    """Train from scratch without one passive feature party (the reference
    model an unlearning run is judged against)."""
    if drop_party == topology.active_index:
        raise UnsupportedOperationError("cannot drop the active party: it holds the labels")
    if drop_party not in topology.feature_parties:
        raise ValueError(f"party {drop_party} is not a feature party")
    base = cfg.participating if cfg.participating is not None else topology.feature_parties
    remaining = tuple(k for k in base if k != drop_party)
    if not remaining:
        raise UnsupportedOperationError("dropping the only feature party leaves no model")
    model = build_model(data, topology, spec, cfg.seed, remaining)
    model.loss_trace = train_model(model, data, cfg)
    return model


def predict_logits(model: VflModel, data: PartitionedDataset,
                   indices=None, batch_size: int = 512) -> np.ndarray:
    """Batched collaborative forward passes (inference rounds on the bus)."""
    idx = np.arange(data.num_samples) if indices is None else np.asarray(indices)
    sim = SplitVfl(model, data)
    outs = []
    for start in range(0, idx.size, batch_size):
        outs.append(sim.forward_round(idx[start:start + batch_size], kind="infer"))
        sim.end_inference_round()
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes))


def predict_probs(model: VflModel, data: PartitionedDataset,
                  indices=None, batch_size: int = 512) -> np.ndarray:
    return nn.softmax(predict_logits(model, data, indices, batch_size))
