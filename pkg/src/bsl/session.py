"""Split-training sessions: client/server state machines and the run loop.

The protocol is strictly lockstep per batch: the client sends smashed data
(split activations plus labels), the server answers with the loss gradient
at the split, and only then may the next batch start. Handshake first,
close frame last; any out-of-order frame is a protocol-state error.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import leakage
from .binary import count_duplicate_kernels, pack_bits, sign, unpack_bits
from .config import ExperimentConfig
from .dp import DpConfig, apply_mechanism, make_noise_rng
from .errors import (
    ConfigError,
    DimensionError,
    HandshakeError,
    ProtocolStateError,
    TransportError,
)
from .model import BConv, ClientHalf, ServerHalf, build_halves, get_preset
from .nn import SgdConfig, softmax_cross_entropy
from .transport import (
    inproc_pair,
    recv_message,
    send_message,
    tcp_accept,
    tcp_connect,
    tcp_listen,
)
from .wire import (
    CloseMessage,
    GradMessage,
    Message,
    SmashedMessage,
    SyncMessage,
    save_checkpoint,
)

NUM_CLASSES = 10


def leak_loss(
    metric: str, a: np.ndarray, x: np.ndarray, need_grad: bool
) -> tuple[float, np.ndarray | None]:
    """Dispatch the configured leak loss; grad is None when not requested."""
    if metric == "ssim":
        value, grad = leakage.ssim_loss_grad(a, x)
        return value, grad if need_grad else None
    if metric == "dcor":
        value, grad = leakage.dcor_loss_grad(a, x)
        return value, grad if need_grad else None
    raise ConfigError(f"unknown leak metric {metric!r}")


class ServerSession:
    """Server half of the protocol, written as an explicit state machine.

    `handle` maps one inbound message to one reply (or None to stop), so
    tests can drive it without a transport; `loop` pumps a transport.
    """

    def __init__(
        self,
        server: ServerHalf,
        expected: SyncMessage,
        dropout_rng: np.random.Generator,
    ) -> None:
        self.server = server
        self.expected = expected
        self.dropout_rng = dropout_rng
        self.state = "init"
        self.next_batch_id = 0
        self.error: str | None = None

    def _fail(self, reason: str) -> CloseMessage:
        self.error = reason
        self.state = "closed"
        return CloseMessage(reason=reason)

    def handle(self, msg: Message) -> Message | None:
        if isinstance(msg, SyncMessage):
            if self.state != "init":
                return self._fail("protocol-state error: sync replayed on a live session")
            own = self.expected
            for name, mine, theirs in (
                ("protocol_version", own.protocol_version, msg.protocol_version),
                ("batch_size", own.batch_size, msg.batch_size),
                ("learning_rate", own.learning_rate, msg.learning_rate),
                ("epochs", own.epochs, msg.epochs),
                ("split_shape", tuple(own.split_shape), tuple(msg.split_shape)),
            ):
                if mine != theirs:
                    return self._fail(
                        f"sync mismatch on {name}: client={theirs!r} server={mine!r}"
                    )
            self.state = "synced"
            return SyncMessage(
                batch_size=own.batch_size,
                learning_rate=own.learning_rate,
                epochs=own.epochs,
                split_shape=tuple(own.split_shape),
            )
        if isinstance(msg, SmashedMessage):
            if self.state != "synced":
                return self._fail("protocol-state error: smashed data before sync")
            if msg.batch_id != self.next_batch_id:
                return self._fail(
                    f"protocol-state error: batch id {msg.batch_id}, expected {self.next_batch_id}"
                )
            a = unpack_bits(msg.payload) if msg.is_packed else msg.payload
            expect = tuple(self.expected.split_shape)
            if tuple(a.shape[1:]) != expect:
                return self._fail(
                    f"split shape mismatch: payload {tuple(a.shape[1:])}, synced {expect}"
                )
            if msg.labels.shape != (a.shape[0],):
                return self._fail(
                    f"labels shape {msg.labels.shape} does not match batch {a.shape[0]}"
                )
            if msg.labels.size and msg.labels.max() >= NUM_CLASSES:
                return self._fail(f"label {int(msg.labels.max())} out of range")
            logits, caches = self.server.forward(a, training=True, rng=self.dropout_rng)
            loss, grad_logits = softmax_cross_entropy(logits, msg.labels.astype(np.int64))
            grad_a = self.server.backward(grad_logits, caches)
            self.next_batch_id += 1
            return GradMessage(batch_id=msg.batch_id, grad=grad_a, loss=loss)
        if isinstance(msg, GradMessage):
            return self._fail("protocol-state error: gradient frames flow server to client")
        if isinstance(msg, CloseMessage):
            self.state = "closed"
            return None
        return self._fail(f"unhandled message {type(msg).__name__}")

    def loop(self, transport) -> None:
        try:
            while self.state != "closed":
                reply = self.handle(recv_message(transport))
                if reply is not None:
                    send_message(transport, reply)
        except TransportError as e:
            if self.state != "closed":
                self.error = f"transport failed: {e}"
        finally:
            transport.close()


class ClientSession:
    """Client half: forwards batches, applies DP, combines task and leak grads."""

    def __init__(
        self,
        client: ClientHalf,
        transport,
        sync: SyncMessage,
        lam: float,
        leak_metric: str,
        dp: DpConfig,
        dp_rng: np.random.Generator,
    ) -> None:
        self.client = client
        self.transport = transport
        self.sync = sync
        self.lam = lam
        self.leak_metric = leak_metric
        self.dp = dp
        self.dp_rng = dp_rng
        self.state = "init"
        self.batch_id = 0

    def handshake(self) -> None:
        if self.state != "init":
            raise ProtocolStateError(f"handshake in state {self.state!r}")
        send_message(self.transport, self.sync)
        reply = recv_message(self.transport)
        if isinstance(reply, CloseMessage):
            raise HandshakeError(reply.reason or "server rejected handshake")
        if not isinstance(reply, SyncMessage):
            raise ProtocolStateError(f"expected sync echo, got {type(reply).__name__}")
        self.state = "idle"

    def transmit_activation(self, x: np.ndarray, training: bool) -> tuple[np.ndarray, dict]:
        """Client forward plus the DP transform; returns what the server would see."""
        a_out, ctx = self.client.forward(x, training)
        if ctx["binary"]:
            a_send = apply_mechanism(self.dp, ctx["a_pre"], a_out, self.dp_rng)
        else:
            a_send = a_out
        ctx["a_b"] = a_out
        return a_send, ctx

    def train_batch(self, x: np.ndarray, y: np.ndarray) -> dict:
        """One lockstep round: send smashed data, receive gradient, update."""
        if self.state != "idle":
            raise ProtocolStateError(
                f"cannot send batch {self.batch_id} in state {self.state!r}"
            )
        a_send, ctx = self.transmit_activation(x, training=True)
        payload = pack_bits(a_send) if ctx["binary"] else a_send
        send_message(
            self.transport,
            SmashedMessage(batch_id=self.batch_id, payload=payload, labels=y),
        )
        self.state = "pending"
        reply = recv_message(self.transport)
        if isinstance(reply, CloseMessage):
            self.state = "closed"
            raise ProtocolStateError(
                reply.reason or f"server closed during batch {self.batch_id}"
            )
        if not isinstance(reply, GradMessage):
            raise ProtocolStateError(f"expected gradient, got {type(reply).__name__}")
        if reply.batch_id != self.batch_id:
            raise ProtocolStateError(
                f"gradient for batch {reply.batch_id}, expected {self.batch_id}"
            )
        if reply.grad.shape != a_send.shape:
            raise DimensionError(
                f"gradient shape {reply.grad.shape} != activation {a_send.shape}"
            )
        e2 = None
        if self.lam < 1.0:
            # gradient on the pre-binarization activation (STE carries it
            # through sign); the reported value uses the binarized maps
            _, g2 = leak_loss(self.leak_metric, ctx["a_pre"], x, need_grad=True)
            e2, _ = leak_loss(self.leak_metric, ctx["a_b"], x, need_grad=False)
            combined = self.lam * reply.grad + (1.0 - self.lam) * g2.astype(np.float32)
        else:
            combined = reply.grad
        self.client.backward(combined, ctx)
        self.batch_id += 1
        self.state = "idle"
        return {"loss": reply.loss, "e2": e2}

    def close(self) -> None:
        if self.state in ("idle", "init"):
            send_message(self.transport, CloseMessage())
        self.state = "closed"
        self.transport.close()


@dataclass
class RunReport:
    """Everything a training run produced, ready for JSON/CSV export."""

    preset: str
    seed: int
    transport: str
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    test_accuracy: float = 0.0
    test_loss: float = 0.0
    duplicate_kernels: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "transport": self.transport,
            "config": self.config,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "test_accuracy": self.test_accuracy,
            "test_loss": self.test_loss,
            "duplicate_kernels": self.duplicate_kernels,
            "timings": self.timings,
            "dataset": self.dataset,
        }


def _eval_halves(
    session: ClientSession,
    server: ServerHalf,
    x: np.ndarray,
    y: np.ndarray,
    batch_size: int,
) -> tuple[float, float]:
    """Loss and accuracy over a dataset, through the same DP lens as transmission."""
    n = x.shape[0]
    total_loss = 0.0
    correct = 0
    for lo in range(0, n, batch_size):
        xb = x[lo : lo + batch_size]
        yb = y[lo : lo + batch_size].astype(np.int64)
        a_send, _ = session.transmit_activation(xb, training=False)
        logits, _ = server.forward(a_send, training=False)
        loss, _ = softmax_cross_entropy(logits, yb)
        total_loss += loss * xb.shape[0]
        correct += int((np.argmax(logits, axis=1) == yb).sum())
    return total_loss / n, correct / n


def duplicate_kernel_counts(client: ClientHalf) -> list[dict]:
    """Duplicate sign-pattern counts for every binarized conv on the client."""
    out = []
    for i in client.layer_range:
        if isinstance(client.spec.layers[i], BConv):
            packed = pack_bits(sign(client.params[i]["w"].value))
            counts = count_duplicate_kernels(packed)
            out.append({"layer": i, **counts})
    return out


def run_session(cfg: ExperimentConfig, dataset: dict) -> RunReport:
    """Train per the config over the configured transport; returns the report.

    The server half always runs on its own thread behind a transport, so
    in-process and TCP runs execute the identical lockstep schedule.
    """
    cfg.validate()
    spec = get_preset(cfg.preset)
    t_start = time.perf_counter()

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss, dropout_ss = ss.spawn(3)
    sgd = SgdConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    client_half, server_half = build_halves(spec, init_ss, sgd)
    dp_rng = make_noise_rng(np.random.SeedSequence(entropy=[cfg.seed, cfg.dp.seed]))
    shuffle_rng = np.random.default_rng(shuffle_ss)

    x_all = dataset["x_train"][: cfg.train_size]
    y_all = dataset["y_train"][: cfg.train_size]
    if x_all.shape[0] < cfg.train_size:
        raise ConfigError(
            f"train_size {cfg.train_size} exceeds dataset of {x_all.shape[0]}"
        )
    n_val = max(1, cfg.train_size // 10)  # validation is the last tenth
    x_train, y_train = x_all[:-n_val], y_all[:-n_val]
    x_val, y_val = x_all[-n_val:], y_all[-n_val:]
    x_test = dataset["x_test"][: cfg.test_size]
    y_test = dataset["y_test"][: cfg.test_size]
    n_probe = min(cfg.probe_images, x_test.shape[0])
    x_probe = x_test[:n_probe]

    sync = SyncMessage(
        batch_size=cfg.batch_size,
        learning_rate=cfg.lr,
        epochs=cfg.epochs,
        split_shape=spec.split_shape,
    )
    server_session = ServerSession(
        server_half, sync, dropout_rng=np.random.default_rng(dropout_ss)
    )

    if cfg.transport == "tcp":
        listener = tcp_listen(cfg.host, cfg.port)
        server_thread = threading.Thread(
            target=lambda: server_session.loop(tcp_accept(listener)), daemon=True
        )
        server_thread.start()
        port = listener.getsockname()[1]
        client_transport = tcp_connect(cfg.host, port)
    else:
        client_transport, server_transport = inproc_pair()
        server_thread = threading.Thread(
            target=server_session.loop, args=(server_transport,), daemon=True
        )
        server_thread.start()
        listener = None

    session = ClientSession(
        client_half, client_transport, sync,
        lam=cfg.lam, leak_metric=cfg.leak_metric, dp=cfg.dp, dp_rng=dp_rng,
    )

    report = RunReport(
        preset=cfg.preset,
        seed=cfg.seed,
        transport=cfg.transport,
        config={
            "lambda": cfg.lam, "leak_metric": cfg.leak_metric,
            "dp": {"kind": cfg.dp.kind, "epsilon": cfg.dp.epsilon, "p": cfg.dp.p},
            "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
            "momentum": cfg.momentum, "weight_decay": cfg.weight_decay,
            "train_size": cfg.train_size, "test_size": cfg.test_size,
        },
        dataset=dict(dataset.get("info", {})),
    )

    best_val = np.inf
    best_arrays: dict[str, np.ndarray] | None = None
    per_epoch_s: list[float] = []
    try:
        session.handshake()
        steps = x_train.shape[0] // cfg.batch_size
        if steps == 0:
            raise ConfigError(
                f"no full batches: {x_train.shape[0]} train rows, batch {cfg.batch_size}"
            )
        for epoch in range(cfg.epochs):
            t_epoch = time.perf_counter()
            perm = shuffle_rng.permutation(x_train.shape[0])
            losses, e2s = [], []
            for s in range(steps):
                idx = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                out = session.train_batch(x_train[idx], y_train[idx])
                losses.append(out["loss"])
                if out["e2"] is not None:
                    e2s.append(out["e2"])
            val_loss, val_acc = _eval_halves(
                session, server_half, x_val, y_val, cfg.batch_size
            )
            a_probe, _ = session.transmit_activation(x_probe, training=False)
            probe_maps = a_probe if a_probe.ndim == 4 else None
            leak = (
                leakage.compute_leakage_report(x_probe, probe_maps).to_dict()
                if probe_maps is not None
                else None
            )
            if leak is not None:
                leak.pop("channels")  # per-channel detail lives in leakage-report runs
            entry = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_loss": float(val_loss),
                "val_accuracy": float(val_acc),
                "e2": float(np.mean(e2s)) if e2s else None,
                "leakage": leak,
            }
            report.epochs.append(entry)
            per_epoch_s.append(time.perf_counter() - t_epoch)
            if val_loss < best_val:
                best_val = val_loss
                best_arrays = {**client_half.snapshot(), **server_half.snapshot()}
                report.best_epoch = epoch
        session.close()
    finally:
        if session.state != "closed":
            session.close()
        server_thread.join(timeout=30)
        if listener is not None:
            listener.close()
    if server_session.error:
        raise ProtocolStateError(f"server ended with error: {server_session.error}")

    if best_arrays is not None:
        client_half.restore({k: v for k, v in best_arrays.items() if k in client_half.named_arrays()})
        server_half.restore({k: v for k, v in best_arrays.items() if k in server_half.named_arrays()})

    # test scoring reuses the DP lens but no transport; session state is closed
    test_loss, test_acc = _eval_halves(session, server_half, x_test, y_test, cfg.batch_size)
    report.test_loss = float(test_loss)
    report.test_accuracy = float(test_acc)
    report.duplicate_kernels = duplicate_kernel_counts(client_half)
    report.timings = {
        "total_s": time.perf_counter() - t_start,
        "per_epoch_s": per_epoch_s,
    }

    if cfg.out:
        from pathlib import Path

        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            out_dir / "checkpoint.bsl",
            {**client_half.named_arrays(), **server_half.named_arrays()},
        )
    return report


def restore_halves(
    cfg: ExperimentConfig, checkpoint: dict[str, np.ndarray]
) -> tuple[ClientHalf, ServerHalf]:
    """Rebuild both halves from a config and checkpoint arrays."""
    spec = get_preset(cfg.preset)
    sgd = SgdConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    client_half, server_half = build_halves(spec, np.random.SeedSequence(cfg.seed), sgd)
    client_half.restore({k: v for k, v in checkpoint.items() if k in client_half.named_arrays()})
    server_half.restore({k: v for k, v in checkpoint.items() if k in server_half.named_arrays()})
    return client_half, server_half
