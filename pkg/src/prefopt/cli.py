"""Command-line entry point: synthesize data, build reference checkpoints,
precompute reference log-probabilities, train, evaluate, verify, and re-run
any artifact-writing command from its manifest.

Exit codes: 0 success, 1 usage/config, 2 I/O, 3 integrity, 4 divergence
abort, 5 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .dataio import (
    RefLogProbCache,
    SyntheticSpec,
    generate_synthetic,
    load_preference_file,
    score_references,
    write_preference_file,
)
from .errors import (
    DivergenceError,
    EncodingError,
    IntegrityError,
    InvalidConfigError,
    InvalidWeightsError,
    LockHeldError,
    NumericInputError,
    ParseError,
    TapeConsumedError,
    UsageError,
)
from .losses import LossConfig
from .oracle import SUITES
from .prefmath import ClipConfig, ReferenceWeights
from .toypolicy import load_policy, make_reference_family, save_policy
from .trainer import (
    AdamParams,
    ExperimentSpec,
    MethodSpec,
    TrainConfig,
    evaluate,
    run_experiment,
    train,
    write_history,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_INTEGRITY = 3
EXIT_DIVERGENCE = 4
EXIT_VERIFICATION = 5

MANIFEST_NAME = "manifest.json"


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; the contract here is 1."""

    def error(self, message):
        raise UsageError(message)


@contextlib.contextmanager
def output_lock(out_dir: Path):
    """Guard an output directory against concurrent invocations."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeldError(f"output directory {out_dir} is locked by another "
                            f"invocation (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, resolved: dict,
                   seeds: list[int], inputs: dict[str, str],
                   outputs: list[str]) -> None:
    doc = {
        "tool": "prefopt",
        "tool_version": __version__,
        "command": command,
        "resolved_config": resolved,
        "seeds": seeds,
        "input_hashes": {name: _sha256_file(p) for name, p in inputs.items()},
        "outputs": outputs,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _parse_weights(text: str) -> ReferenceWeights:
    try:
        return ReferenceWeights(tuple(float(v) for v in text.split(",")))
    except ValueError as exc:
        raise UsageError(f"bad fixed weights {text!r}: {exc}") from None


def _loss_config_from(ns) -> LossConfig:
    kind = ns.loss.replace("-", "_")
    mode = ns.alpha_mode
    fixed = None
    if mode.startswith("fixed="):
        fixed = _parse_weights(mode[len("fixed="):])
        mode = "fixed"
    return LossConfig(beta=ns.beta, kind=kind,
                      clip=ClipConfig(eps_max=ns.eps_max, mode=ns.clip),
                      weight_mode=mode, fixed_weights=fixed)


def _add_loss_flags(p) -> None:
    p.add_argument("--loss", choices=["dpo", "multi-dpo", "mrpo"], default="mrpo")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--eps-max", type=float, default=0.1)
    p.add_argument("--clip", choices=["fixed", "adaptive", "none"], default="adaptive")
    p.add_argument("--alpha-mode", default="arwc",
                   help="uniform | arwc | fixed=<w0,w1,...>")


def _resolved(ns, keys) -> dict:
    return {k: getattr(ns, k) for k in keys}


# -- commands -----------------------------------------------------------------


def cmd_synth(ns) -> int:
    if not 0.0 <= ns.noise < 0.5:
        raise InvalidConfigError(f"--noise must be in [0, 0.5), got {ns.noise}")
    out = Path(ns.out)
    with output_lock(out):
        spec = SyntheticSpec(seed=ns.seed, pairs=ns.pairs, noise_rate=ns.noise)
        train_data, test_data = generate_synthetic(spec)
        write_preference_file(out / "train.jsonl", train_data)
        write_preference_file(out / "test.jsonl", test_data)
        write_manifest(out, "synth",
                       _resolved(ns, ["seed", "pairs", "noise"]),
                       seeds=[ns.seed], inputs={},
                       outputs=["train.jsonl", "test.jsonl"])
    print(f"wrote {len(train_data)} train / {len(test_data)} test pairs to {out}")
    return EXIT_OK


def cmd_make_refs(ns) -> int:
    qualities = [float(q) for q in ns.qualities.split(",")]
    if not qualities:
        raise UsageError("--qualities must name at least one quality")
    data_seed = ns.data_seed
    if data_seed is None:
        if ns.data is None:
            raise UsageError("give --data (to read its manifest) or --data-seed")
        manifest = json.loads((Path(ns.data) / MANIFEST_NAME).read_text(encoding="utf-8"))
        data_seed = int(manifest["resolved_config"]["seed"])
    out = Path(ns.out)
    with output_lock(out):
        spec = SyntheticSpec(seed=data_seed, pairs=1)
        reward = spec.planted_reward()
        names = []
        for i, q in enumerate(qualities):
            policy = make_reference_family(ns.seed + i, q, reward)
            name = f"ref{i}.policy.json"
            save_policy(policy, out / name)
            names.append(name)
        write_manifest(out, "make-refs",
                       {"qualities": ns.qualities, "seed": ns.seed,
                        "data_seed": data_seed, "data": ns.data},
                       seeds=[ns.seed, data_seed], inputs={}, outputs=names)
    print(f"wrote {len(names)} reference checkpoints to {out}")
    return EXIT_OK


def cmd_score_refs(ns) -> int:
    data = load_preference_file(ns.data)
    refs = [load_policy(p) for p in ns.refs]
    out = Path(ns.out)
    with output_lock(out):
        cache = score_references(data, refs)
        cache.save(out / "refs.cache")
        write_manifest(out, "score-refs",
                       {"data": ns.data, "refs": list(ns.refs)},
                       seeds=[],
                       inputs={f"ref{i}": p for i, p in enumerate(ns.refs)}
                       | {"data": ns.data},
                       outputs=["refs.cache"])
    for k in range(cache.n_references):
        mean_c = float(cache.values[:, k, 0].mean())
        mean_r = float(cache.values[:, k, 1].mean())
        print(f"reference {k}: mean logprob chosen {mean_c:.4f} "
              f"rejected {mean_r:.4f}")
    return EXIT_OK


def _train_config_from(ns) -> TrainConfig:
    return TrainConfig(loss=_loss_config_from(ns), learning_rate=ns.lr,
                       optimizer=ns.optimizer, adam=AdamParams(),
                       epochs=ns.epochs, batch_size=ns.batch_size,
                       seed=ns.seed, eval_every=ns.eval_every,
                       divergence_threshold=ns.divergence_threshold)


def cmd_train(ns) -> int:
    data = load_preference_file(ns.data)
    cache = RefLogProbCache.load(ns.cache)
    policy = load_policy(ns.policy_init)
    eval_data = load_preference_file(ns.eval_data) if ns.eval_data else None
    eval_cache = RefLogProbCache.load(ns.eval_cache) if ns.eval_cache else None
    config = _train_config_from(ns)
    out = Path(ns.out)
    with output_lock(out):
        try:
            policy, history = train(policy, cache, data, config,
                                    eval_data=eval_data, eval_refs=eval_cache)
        except DivergenceError as exc:
            write_history(out / "run.log.jsonl", exc.history)
            (out / "divergence.json").write_text(json.dumps({
                "step": exc.step, "loss": exc.loss,
                "threshold": config.divergence_threshold,
            }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
            print(f"divergence abort: {exc}", file=sys.stderr)
            return EXIT_DIVERGENCE
        save_policy(policy, out / "policy.json")
        write_history(out / "run.log.jsonl", history)
        write_manifest(out, "train",
                       _resolved(ns, ["data", "cache", "policy_init", "loss",
                                      "beta", "eps_max", "clip", "alpha_mode",
                                      "lr", "optimizer", "epochs", "batch_size",
                                      "seed", "eval_every",
                                      "divergence_threshold", "eval_data",
                                      "eval_cache"]),
                       seeds=[ns.seed],
                       inputs={"data": ns.data, "cache": ns.cache,
                               "policy_init": ns.policy_init},
                       outputs=["policy.json", "run.log.jsonl"])
    final = history[-1]
    print(f"final step {final.step}: train loss {final.train_loss:.6f} "
          f"accuracy {final.test_accuracy:.4f} margin {final.test_reward_margin:.4f}")
    return EXIT_OK


def cmd_eval(ns) -> int:
    data = load_preference_file(ns.data)
    cache = RefLogProbCache.load(ns.cache)
    policy = load_policy(ns.policy)
    result = evaluate(policy, cache, data, _loss_config_from(ns))
    line = json.dumps({"accuracy": result.accuracy,
                       "reward_margin": result.reward_margin,
                       "tie_rate": result.tie_rate}, sort_keys=True)
    print(line)
    if ns.out:
        out = Path(ns.out)
        with output_lock(out):
            (out / "eval.json").write_text(line + "\n", encoding="utf-8")
            write_manifest(out, "eval",
                           _resolved(ns, ["data", "cache", "policy", "loss",
                                          "beta", "eps_max", "clip",
                                          "alpha_mode"]),
                           seeds=[],
                           inputs={"data": ns.data, "cache": ns.cache,
                                   "policy": ns.policy},
                           outputs=["eval.json"])
    return EXIT_OK


def cmd_verify(ns) -> int:
    if ns.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {ns.trials}")
    names = list(SUITES) if ns.suite == "all" else [ns.suite]
    all_pass = True
    for name in names:
        report = SUITES[name](ns.seed, ns.trials)
        print(report.format_line())
        all_pass = all_pass and report.passed
    return EXIT_OK if all_pass else EXIT_VERIFICATION


def cmd_experiment(ns) -> int:
    methods = []
    for name in ns.methods.split(","):
        base = _loss_config_from(ns)
        methods.append(MethodSpec(name=name,
                                  loss=replace(base, kind=name.replace("-", "_"))))
    spec = ExperimentSpec(
        methods=tuple(methods),
        seeds=tuple(int(s) for s in ns.seeds.split(",")),
        pairs=ns.pairs, noise_rate=ns.noise,
        base_quality=ns.base_quality,
        ref_qualities=tuple(float(q) for q in ns.ref_qualities.split(",")),
        train=_train_config_from(ns),
    )
    report = run_experiment(spec)
    out = Path(ns.out)
    with output_lock(out):
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
        write_manifest(out, "experiment",
                       _resolved(ns, ["methods", "seeds", "pairs", "noise",
                                      "base_quality", "ref_qualities", "loss",
                                      "beta", "eps_max", "clip", "alpha_mode",
                                      "lr", "optimizer", "epochs", "batch_size",
                                      "seed", "eval_every",
                                      "divergence_threshold"]),
                       seeds=list(spec.seeds), inputs={},
                       outputs=["report.csv", "report.txt"])
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_rerun(ns) -> int:
    manifest = json.loads(Path(ns.manifest).read_text(encoding="utf-8"))
    command = manifest["command"]
    resolved = manifest["resolved_config"]
    out = ns.out or str(Path(ns.manifest).parent)
    argv = [command]
    for key, value in resolved.items():
        if value is None:
            continue
        flag = "--" + key.replace("_", "-")
        if command == "score-refs" and key == "refs":
            argv.append(flag)
            argv.extend(str(v) for v in value)
        else:
            argv.extend([flag, str(value)])
    argv.extend(["--out", str(out)])
    return dispatch(argv)


def build_parser() -> _Parser:
    parser = _Parser(prog="prefopt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic preference dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("make-refs", help="train reference-policy checkpoints "
                                         "against a dataset's planted reward")
    p.add_argument("--data", help="dataset directory (reads its manifest)")
    p.add_argument("--data-seed", type=int, help="planted-reward seed override")
    p.add_argument("--qualities", default="0.2,0.9",
                   help="comma-separated qualities in [0,1]; first is the "
                        "initializing reference")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_refs)

    p = sub.add_parser("score-refs", help="precompute reference log-probabilities")
    p.add_argument("--data", required=True)
    p.add_argument("--refs", nargs="+", required=True,
                   help="policy checkpoints; the first is the initializing reference")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score_refs)

    p = sub.add_parser("train", help="train a policy on preference data")
    p.add_argument("--data", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--policy-init", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--eval-cache")
    _add_loss_flags(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=200)
    p.add_argument("--divergence-threshold", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--policy", required=True)
    _add_loss_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the exact verification suites")
    p.add_argument("--suite", choices=[*SUITES, "all"], required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("experiment", help="multi-seed method comparison on "
                                          "synthetic data")
    p.add_argument("--methods", default="dpo,mrpo")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--base-quality", type=float, default=0.2)
    p.add_argument("--ref-qualities", default="0.9")
    _add_loss_flags(p)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=200)
    p.add_argument("--divergence-threshold", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("rerun", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_rerun)

    return parser


def _load_config_file(path: str) -> dict:
    """JSON object or key=value lines; keys match long flag names."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: invalid JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config file {path}: expected a JSON object")
        return doc
    doc = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config file {path}: line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        doc[key.strip()] = value.strip()
    return doc


def _inject_config(argv: list[str]) -> list[str]:
    """Expand ``--config FILE`` into flags placed before the explicit ones,
    so explicit flags override the file."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config needs a file path")
    doc = _load_config_file(argv[i + 1])
    injected: list[str] = []
    for key, value in doc.items():
        injected.extend([f"--{str(key).replace('_', '-')}", str(value)])
    # keep the subcommand first, then file-provided flags, then explicit ones
    rest = argv[:i] + argv[i + 2:]
    if rest and not rest[0].startswith("-"):
        return [rest[0], *injected, *rest[1:]]
    return [*injected, *rest]


def dispatch(argv) -> int:
    parser = build_parser()
    ns = parser.parse_args(_inject_config(list(argv)))
    return ns.func(ns)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return dispatch(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidConfigError, InvalidWeightsError, NumericInputError,
            EncodingError, ParseError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LockHeldError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IntegrityError, TapeConsumedError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DivergenceError as exc:
        print(f"divergence abort: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
