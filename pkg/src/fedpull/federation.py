"""Cross-silo orchestration: local training, pull selection, weighted aggregation, push.

One round is: every client trains on its own corpus, selects which tensors to
send (pull), the server fuses the received tensors with a data-size-weighted
mean, and the resulting central model is broadcast back (push).  All stochastic
choices derive from explicit seed tuples, so runs are reproducible and
independent of client scheduling.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import Corpus, DomainSpec, concatenate, generate_domain, split
from .metrics import EvalResult, corpus_bleu, norm_histogram, token_accuracy
from .model import (
    ModelConfig,
    ModelState,
    OptimizerState,
    greedy_decode_batch,
    init_model,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train_steps,
)
from .selection import (
    DP_MODES,
    BandwidthRecord,
    PullPolicy,
    SelectionResult,
    bandwidth,
    cluster_persistence,
    full_selection,
    select_dp,
)
from .tensors import NamedTensor

# Seed-derivation tags; every random stream is keyed by (base seed, tag, ...).
_TAG_SPLIT = 1
_TAG_INIT = 2
_TAG_PRETRAIN = 3
_TAG_TRAIN = 4
_TAG_SELECT = 5
_TAG_PUSH = 6
_TAG_FINETUNE = 7
_TAG_BASELINE = 8
_TAG_CHAIN = 9
_TAG_COMBINED = 10

EVAL_BATCH = 128


def _derived_int(parts: list[int]) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    tensors: dict[str, NamedTensor]
    n_k: int


@dataclass(frozen=True)
class ServerState:
    central_model: ModelState
    round: int
    total_rounds: int
    client_weights: dict[str, int]

    def __post_init__(self) -> None:
        if self.round > self.total_rounds:
            raise ValueError(f"round {self.round} exceeds total_rounds {self.total_rounds}")

    @property
    def total_samples(self) -> int:
        return sum(self.client_weights.values())


@dataclass(frozen=True)
class ClientState:
    id: str
    corpus: Corpus
    model: ModelState
    optimizer: OptimizerState
    snapshot: ModelState | None
    steps_per_round: int

    def __post_init__(self) -> None:
        if self.snapshot is not None and set(self.snapshot.tensors) != set(self.model.tensors):
            raise ValueError(f"client '{self.id}': snapshot tensor names differ from model")

    @property
    def n_k(self) -> int:
        return self.corpus.n_k


@dataclass(frozen=True)
class ClientRoundRecord:
    client_id: str
    n_k: int
    steps: int
    train_loss: float | None
    selection: SelectionResult
    pull_bandwidth: BandwidthRecord
    push_bandwidth: BandwidthRecord
    eval: dict[str, EvalResult] | None = None
    post_ft_eval: dict[str, EvalResult] | None = None


@dataclass(frozen=True)
class RoundReport:
    round: int
    clients: list[ClientRoundRecord]
    server_eval: dict[str, EvalResult] | None = None


def fedavg_aggregate(server: ServerState, updates: list[ClientUpdate]) -> ServerState:
    """Data-size-weighted mean of the received tensors, per tensor name.

    Weights renormalize over the clients that actually sent each tensor; a
    tensor nobody sent keeps its current server value.  Accumulation runs in
    float64, clients are folded in ascending id order.
    """
    central = server.central_model
    ordered = sorted(updates, key=lambda u: u.client_id)
    seen = set()
    for u in ordered:
        if u.client_id in seen:
            raise ValueError(f"duplicate update from client '{u.client_id}'")
        seen.add(u.client_id)
        for name, t in u.tensors.items():
            ref = central.tensors.get(name)
            if ref is None:
                raise ValueError(f"client '{u.client_id}' sent unknown tensor '{name}'")
            if t.shape != ref.shape:
                raise ValueError(
                    f"client '{u.client_id}' tensor '{name}': shape {t.shape} != server {ref.shape}"
                )
    new_tensors: dict[str, NamedTensor] = {}
    for name in central.names():
        senders = [u for u in ordered if name in u.tensors]
        if not senders:
            new_tensors[name] = central.tensors[name]
            continue
        total = float(sum(u.n_k for u in senders))
        acc = np.zeros(central.tensors[name].param_count, dtype=np.float64)
        for u in senders:
            acc += (u.n_k / total) * u.tensors[name].values.astype(np.float64)
        new_tensors[name] = NamedTensor(name, central.tensors[name].shape, acc.astype(np.float32))
    return replace(server, central_model=ModelState(central.config, new_tensors))


@dataclass(frozen=True)
class _TrainedClient:
    index: int
    client: ClientState
    model: ModelState
    optimizer: OptimizerState
    train_loss: float | None
    selection: SelectionResult
    update: ClientUpdate
    pull_bandwidth: BandwidthRecord


def run_round(
    server: ServerState,
    clients: list[ClientState],
    policy: PullPolicy,
    *,
    base_seed: int = 0,
    batch_size: int = 32,
    max_workers: int = 1,
) -> tuple[ServerState, list[ClientState], RoundReport]:
    """One pull -> aggregate -> push cycle.  Round 0 always exchanges everything
    because no previous-round snapshot exists yet."""
    if server.round >= server.total_rounds:
        raise ValueError(f"round {server.round} already at total_rounds {server.total_rounds}")
    ordered = sorted(clients, key=lambda c: c.id)
    rnd = server.round

    def train_one(item: tuple[int, ClientState]) -> _TrainedClient:
        idx, client = item
        model, opt, losses = train_steps(
            client.model,
            client.optimizer,
            client.corpus,
            client.steps_per_round,
            batch_size,
            np.random.SeedSequence([base_seed, _TAG_TRAIN, rnd, idx]),
        )
        if client.snapshot is None:
            selection = full_selection(model)
        else:
            pol = policy
            if policy.mode == "random":
                pol = replace(policy, seed=_derived_int([policy.seed, _TAG_SELECT, rnd, idx]))
            selection = select_dp(model, client.snapshot, pol)
        update = ClientUpdate(
            client_id=client.id,
            tensors={name: model.tensors[name] for name in selection.kept},
            n_k=client.n_k,
        )
        loss = float(np.mean(losses[-50:])) if losses else None
        return _TrainedClient(
            idx, client, model, opt, loss, selection, update, bandwidth(selection, model, "pull")
        )

    items = list(enumerate(ordered))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            trained = list(pool.map(train_one, items))
    else:
        trained = [train_one(it) for it in items]
    trained.sort(key=lambda t: t.index)

    new_server = fedavg_aggregate(server, [t.update for t in trained])
    central = new_server.central_model

    new_clients: list[ClientState] = []
    records: list[ClientRoundRecord] = []
    for t in trained:
        if policy.scope == "pull_only":
            pushed_model = central
            push_sel = full_selection(central)
        else:
            pol = policy
            if policy.mode == "random":
                pol = replace(policy, seed=_derived_int([policy.seed, _TAG_PUSH, rnd, t.index]))
            push_sel = select_dp(central, t.model, pol)
            merged = dict(t.model.tensors)
            for name in push_sel.kept:
                merged[name] = central.tensors[name]
            pushed_model = ModelState(central.config, merged)
        push_bw = bandwidth(push_sel, central, "push")
        new_clients.append(
            replace(t.client, model=pushed_model, optimizer=t.optimizer, snapshot=t.model)
        )
        records.append(
            ClientRoundRecord(
                client_id=t.client.id,
                n_k=t.client.n_k,
                steps=t.client.steps_per_round,
                train_loss=t.train_loss,
                selection=t.selection,
                pull_bandwidth=t.pull_bandwidth,
                push_bandwidth=push_bw,
            )
        )
    new_server = replace(new_server, round=rnd + 1)
    return new_server, new_clients, RoundReport(round=rnd, clients=records)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_model(model: ModelState, test_corpora: dict[str, Corpus]) -> dict[str, EvalResult]:
    """Greedy-decode every test split and score BLEU plus token accuracy."""
    out = {}
    for domain in sorted(test_corpora):
        corpus = test_corpora[domain]
        hyps: list[list[int]] = []
        refs = [list(tgt) for _, tgt in corpus.pairs]
        sources = [src for src, _ in corpus.pairs]
        for lo in range(0, len(sources), EVAL_BATCH):
            hyps.extend(greedy_decode_batch(model, sources[lo : lo + EVAL_BATCH]))
        out[domain] = EvalResult(
            domain=domain,
            bleu=corpus_bleu(hyps, refs),
            token_accuracy=token_accuracy(hyps, refs),
            n_sentences=corpus.n_k,
        )
    return out


def cross_domain_average(evals: dict[str, EvalResult]) -> float:
    return float(np.mean([e.token_accuracy for e in evals.values()]))


# ---------------------------------------------------------------------------
# Centralized baselines
# ---------------------------------------------------------------------------


def combined_finetune(
    model: ModelState,
    corpora: list[Corpus],
    steps: int,
    *,
    batch_size: int = 32,
    optimizer: str = "adam",
    learning_rate: float = 1e-3,
    seed=0,
) -> ModelState:
    """Fine-tune on the concatenation of all corpora (large domains dominate)."""
    pool = concatenate(corpora)
    out, _, _ = train_steps(
        model, make_optimizer(optimizer, learning_rate), pool, steps, batch_size, seed
    )
    return out


def chained_finetune(
    model: ModelState,
    sequence: list[Corpus],
    steps_each: int,
    *,
    batch_size: int = 32,
    optimizer: str = "adam",
    learning_rate: float = 1e-3,
    base_seed: int = 0,
) -> ModelState:
    """Fine-tune sequentially on each corpus in the given order (fresh optimizer per stage)."""
    if not sequence:
        raise ValueError("empty fine-tuning sequence")
    for i, corpus in enumerate(sequence):
        model, _, _ = train_steps(
            model,
            make_optimizer(optimizer, learning_rate),
            corpus,
            steps_each,
            batch_size,
            np.random.SeedSequence([base_seed, _TAG_CHAIN, i]),
        )
    return model


def local_finetune(client: ClientState, steps: int, *, batch_size: int = 32, seed=0) -> ClientState:
    """Continue training on the client's own corpus only; no server interaction."""
    model, opt, _ = train_steps(client.model, client.optimizer, client.corpus, steps, batch_size, seed)
    return replace(client, model=model, optimizer=opt)


# ---------------------------------------------------------------------------
# Full FL experiment
# ---------------------------------------------------------------------------


@dataclass
class DomainData:
    specs: tuple[DomainSpec, ...]
    train: dict[str, Corpus]
    dev: dict[str, Corpus]
    test: dict[str, Corpus]
    order: list[str]

    @property
    def pretrain_default(self) -> str:
        return max(self.order, key=lambda t: (self.train[t].n_k, -self.order.index(t)))


def build_domains(config: ExperimentConfig) -> DomainData:
    """Generate and split every domain.  Corpora and splits depend only on the
    domain specs, not on the run seed, mirroring fixed real-world datasets."""
    train, dev, test = {}, {}, {}
    order = []
    for spec in config.domains:
        corpus = generate_domain(spec, max_len=config.model.max_len)
        tr, dv, te = split(
            corpus, config.test_n, config.dev_n, np.random.SeedSequence([spec.seed, _TAG_SPLIT])
        )
        train[spec.kind], dev[spec.kind], test[spec.kind] = tr, dv, te
        order.append(spec.kind)
    return DomainData(config.domains, train, dev, test, order)


class PretrainCache:
    """Content-addressed cache of pretrained checkpoints (memory plus optional disk)."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[str, ModelState] = {}

    def get_or_train(self, key_payload: dict, train_fn) -> tuple[ModelState, str]:
        key = hashlib.sha256(
            json.dumps(key_payload, sort_keys=True).encode("utf-8")
        ).hexdigest()
        if key in self._memory:
            return self._memory[key], key
        if self.directory is not None:
            path = self.directory / f"{key}.ckpt"
            if path.exists():
                model = load_checkpoint(path)
                self._memory[key] = model
                return model, key
        model = train_fn()
        self._memory[key] = model
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, self.directory / f"{key}.ckpt")
        return model, key


def pretrain_model(
    config: ExperimentConfig,
    seed: int,
    domains: DomainData,
    cache: PretrainCache | None = None,
) -> tuple[ModelState, str, str]:
    """Train the generic starting model on the designated (largest) domain."""
    tag = config.pretrain_domain or domains.pretrain_default
    init_seed = _derived_int([seed, _TAG_INIT])
    key_payload = {
        "model": dataclasses.asdict(replace(config.model, seed=init_seed)),
        "domain": dataclasses.asdict(next(s for s in config.domains if s.kind == tag)),
        "split": [config.test_n, config.dev_n],
        "steps": config.pretrain_steps,
        "batch_size": config.batch_size,
        "optimizer": config.optimizer,
        "learning_rate": config.learning_rate,
        "train_seed": [seed, _TAG_PRETRAIN],
    }

    def train_fn() -> ModelState:
        model = init_model(replace(config.model, seed=init_seed))
        model, _, _ = train_steps(
            model,
            make_optimizer(config.optimizer, config.learning_rate),
            domains.train[tag],
            config.pretrain_steps,
            config.batch_size,
            np.random.SeedSequence([seed, _TAG_PRETRAIN]),
        )
        return model

    cache = cache or PretrainCache()
    model, key = cache.get_or_train(key_payload, train_fn)
    return model, tag, key


def _thread_count() -> int:
    raw = os.environ.get("FEDPULL_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class ExperimentReport:
    experiment: str
    seed: int
    config_echo: dict
    hist_bucket_width: float
    pretrain: dict | None = None
    rounds: list[RoundReport] = dataclasses.field(default_factory=list)
    final_eval: dict | None = None
    post_fl: list[dict] | None = None
    persistence: list[dict] | None = None
    bandwidth_totals: dict | None = None
    sections: dict = dataclasses.field(default_factory=dict)
    timestamp: str = ""

    def to_json_dict(self) -> dict:
        payload = {
            "schema": "fedpull-report-v1",
            "experiment": self.experiment,
            "seed": self.seed,
            "timestamp": self.timestamp,
            "config": self.config_echo,
            "pretrain": self.pretrain,
            "rounds": [_round_to_dict(r) for r in self.rounds],
            "final_eval": self.final_eval,
            "post_fl": self.post_fl,
            "cluster_persistence": self.persistence,
            "bandwidth_totals": self.bandwidth_totals,
        }
        payload.update(self.sections)
        return _plain(payload)

    def metrics_rows(self) -> list[dict]:
        rows = []
        for rep in self.rounds:
            if rep.server_eval:
                for domain in sorted(rep.server_eval):
                    e = rep.server_eval[domain]
                    rows.append(
                        {
                            "round": rep.round,
                            "client_id": "server",
                            "test_domain": domain,
                            "bleu": e.bleu,
                            "token_accuracy": e.token_accuracy,
                            "params_pulled": "",
                            "params_pushed": "",
                        }
                    )
            for rec in rep.clients:
                if not rec.eval:
                    continue
                for domain in sorted(rec.eval):
                    e = rec.eval[domain]
                    rows.append(
                        {
                            "round": rep.round,
                            "client_id": rec.client_id,
                            "test_domain": domain,
                            "bleu": e.bleu,
                            "token_accuracy": e.token_accuracy,
                            "params_pulled": rec.pull_bandwidth.params_sent,
                            "params_pushed": rec.push_bandwidth.params_sent,
                        }
                    )
        for extra in self.sections.get("model_evals", []):
            rows.append(extra)
        return rows

    def histogram_rows(self) -> list[dict]:
        rows = []
        for rep in self.rounds:
            for rec in rep.clients:
                if not rec.selection.deltas:
                    continue
                for hist in norm_histogram(rec.selection.deltas, self.hist_bucket_width):
                    for lower, count in hist.buckets:
                        rows.append(
                            {
                                "round": rep.round,
                                "client_id": rec.client_id,
                                "group": hist.group,
                                "bucket_lower": lower,
                                "count": count,
                            }
                        )
        return rows


def _plain(obj):
    """Recursively convert numpy scalars/arrays so json.dumps stays happy."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _round_to_dict(rep: RoundReport) -> dict:
    return {
        "round": rep.round,
        "server_eval": {d: e.as_dict() for d, e in rep.server_eval.items()}
        if rep.server_eval
        else None,
        "clients": [
            {
                "client_id": rec.client_id,
                "n_k": rec.n_k,
                "steps": rec.steps,
                "train_loss": rec.train_loss,
                "selection": {
                    "mode": rec.selection.mode,
                    "kept": list(rec.selection.kept),
                    "dropped": list(rec.selection.dropped),
                    "thresholds": dict(rec.selection.thresholds),
                },
                "deltas": [dataclasses.asdict(d) for d in rec.selection.deltas],
                "bandwidth": {
                    "pull": dataclasses.asdict(rec.pull_bandwidth),
                    "push": dataclasses.asdict(rec.push_bandwidth),
                },
                "eval": {d: e.as_dict() for d, e in rec.eval.items()} if rec.eval else None,
                "post_ft_eval": {d: e.as_dict() for d, e in rec.post_ft_eval.items()}
                if rec.post_ft_eval
                else None,
            }
            for rec in rep.clients
        ],
    }


def run_fl(
    config: ExperimentConfig,
    seed: int,
    *,
    policy: PullPolicy | None = None,
    rounds: int | None = None,
    steps_per_round: int | None = None,
    eval_every: int | None = None,
    post_fl_steps: int | None = None,
    pretrain_cache: PretrainCache | None = None,
    domains: DomainData | None = None,
) -> ExperimentReport:
    """Pretrain, run the round loop, evaluate per round, optionally fine-tune locally."""
    policy = policy if policy is not None else config.policy
    rounds = rounds if rounds is not None else config.rounds
    steps_per_round = steps_per_round if steps_per_round is not None else config.steps_per_round
    eval_every = eval_every if eval_every is not None else config.eval_every
    post_fl_steps = (
        post_fl_steps if post_fl_steps is not None else config.post_fl_finetune_steps
    )
    domains = domains or build_domains(config)
    pretrained, pretrain_tag, pretrain_key = pretrain_model(config, seed, domains, pretrain_cache)

    server = ServerState(
        central_model=pretrained,
        round=0,
        total_rounds=max(rounds, 1),
        client_weights={tag: domains.train[tag].n_k for tag in domains.order},
    )
    clients = [
        ClientState(
            id=tag,
            corpus=domains.train[tag],
            model=pretrained,
            optimizer=make_optimizer(config.optimizer, config.learning_rate),
            snapshot=None,
            steps_per_round=steps_per_round,
        )
        for tag in domains.order
    ]

    workers = min(_thread_count(), len(clients))
    report = ExperimentReport(
        experiment=config.experiment,
        seed=seed,
        config_echo=config.echo(),
        hist_bucket_width=config.hist_bucket_width,
        pretrain={
            "domain": pretrain_tag,
            "steps": config.pretrain_steps,
            "cache_key": pretrain_key,
        },
        sections={
            "effective": {
                "policy": dataclasses.asdict(policy),
                "rounds": rounds,
                "steps_per_round": steps_per_round,
                "eval_every": eval_every,
                "post_fl_steps": post_fl_steps,
            }
        },
    )

    for r in range(rounds):
        server, clients, round_report = run_round(
            server,
            clients,
            policy,
            base_seed=seed,
            batch_size=config.batch_size,
            max_workers=workers,
        )
        if (r + 1) % eval_every == 0 or r == rounds - 1:
            server_eval = evaluate_model(server.central_model, domains.test)
            evals = {}
            for client in clients:
                if client.model is server.central_model:
                    evals[client.id] = server_eval
                else:
                    evals[client.id] = evaluate_model(client.model, domains.test)
            round_report = RoundReport(
                round=round_report.round,
                clients=[
                    replace(rec, eval=evals[rec.client_id]) for rec in round_report.clients
                ],
                server_eval=server_eval,
            )
        report.rounds.append(round_report)

    final_server_eval = (
        report.rounds[-1].server_eval
        if report.rounds
        else evaluate_model(server.central_model, domains.test)
    )
    report.final_eval = {
        "server": {d: e.as_dict() for d, e in final_server_eval.items()},
        "clients": {
            rec.client_id: {d: e.as_dict() for d, e in rec.eval.items()}
            for rec in (report.rounds[-1].clients if report.rounds else [])
            if rec.eval
        },
    }

    if post_fl_steps > 0:
        post = []
        for idx, client in enumerate(sorted(clients, key=lambda c: c.id)):
            tuned = local_finetune(
                client,
                post_fl_steps,
                batch_size=config.batch_size,
                seed=np.random.SeedSequence([seed, _TAG_FINETUNE, idx]),
            )
            evals = evaluate_model(tuned.model, domains.test)
            post.append(
                {
                    "client_id": client.id,
                    "steps": post_fl_steps,
                    "eval": {d: e.as_dict() for d, e in evals.items()},
                }
            )
        report.post_fl = post

    if policy.mode in DP_MODES and rounds >= 3:
        report.persistence = cluster_persistence(report.rounds)

    pull_sent = sum(rec.pull_bandwidth.params_sent for rep in report.rounds for rec in rep.clients)
    push_sent = sum(rec.push_bandwidth.params_sent for rep in report.rounds for rec in rep.clients)
    pull_total = sum(rec.pull_bandwidth.params_total for rep in report.rounds for rec in rep.clients)
    push_total = sum(rec.push_bandwidth.params_total for rep in report.rounds for rec in rep.clients)
    report.bandwidth_totals = {
        "pull_params_sent": pull_sent,
        "push_params_sent": push_sent,
        "pull_params_total": pull_total,
        "push_params_total": push_total,
        "exchanged_params_sent": pull_sent + push_sent,
        "exchanged_params_total": pull_total + push_total,
    }
    return report
