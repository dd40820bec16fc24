#!/usr/bin/env python3
"""
SPM プロトコル CLI - NPMの学習からSPMへの変換・実行・分析まで

NPM (ニューラルプロトコルモデル) を学習し、語彙とProbLog節からなる
SPM (意味論的プロトコルモデル) に変換して、MAC環境で評価する。
"""
import argparse
import os
import sys
from typing import Dict, List, Optional

# プロジェクトルートをパスに追加
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

import numpy as np  # noqa: E402
import structlog  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from spm_protocol import __version__  # noqa: E402
from spm_protocol.config import ConfigManager, DomainSource, MergeMode, PortfolioMode, Weighting, settings  # noqa: E402
from spm_protocol.errors import SpmError  # noqa: E402
from spm_protocol.kpi import KPI_COLUMNS, KpiReport  # noqa: E402
from spm_protocol.logging_setup import configure_logging  # noqa: E402
from spm_protocol.services.analytics import (  # noqa: E402
    LOG_BASES,
    net_entropy,
    reconfigure_collision_free,
    select_min_entropy,
    select_min_vocabulary,
    select_random,
    selection_study,
)
from spm_protocol.services.episodic_memory import memory_or_none, save_memory  # noqa: E402
from spm_protocol.services.experiments import (  # noqa: E402
    KNOWN_PROTOCOLS,
    LoadedModels,
    build_policy,
    evaluate_policy,
    mean_of,
    model_info,
    policy_agreement,
    policy_map_export,
    run_experiment,
)
from spm_protocol.services.extraction import (  # noqa: E402
    StateDomain,
    VocabKind,
    extract_graph,
    graph_tables,
    observed_state_domain,
    render_graph_text,
)
from spm_protocol.services.inference import INFERENCE_TRACE_COLUMNS, SpmPolicy, spm_policy  # noqa: E402
from spm_protocol.services.mac_env import EpisodeTrace, derive_rng, run_episode  # noqa: E402
from spm_protocol.services.neural_protocol import train_npm  # noqa: E402
from spm_protocol.services.npm_io import npm_digest, read_npm, write_npm  # noqa: E402
from spm_protocol.services.portfolio import (  # noqa: E402
    Portfolio,
    PortfolioEntry,
    continual_learning_run,
    load_portfolio_file,
    portfolio_run,
)
from spm_protocol.services.problog_io import read_spm, write_spm  # noqa: E402
from spm_protocol.services.semantic_model import construct_spm, normalization_errors  # noqa: E402
from spm_protocol.utils.csv_export import write_csv  # noqa: E402
from spm_protocol.utils.svg_plots import plot_episode_series  # noqa: E402

logger = structlog.get_logger("spm_cli")

NONSTATIONARY_COLUMNS = ("episode", "environment", "model", "mean_reward", "goodput", "n_r", "n_c", "n_d")


def _config(args, **overrides) -> ConfigManager:
    """--config のファイルにコマンドライン指定を上書きしたConfigManager"""
    if args.seed is not None:
        overrides.setdefault("seed", args.seed)
    return ConfigManager(args.config, overrides)


def _seed(args, cm: ConfigManager) -> int:
    if args.seed is not None:
        return args.seed
    return int(cm.get("seed", 0))


# --- train / extract / transform ---------------------------------------


def cmd_train(args) -> int:
    cm = _config(args, **{"lambda": args.lam, "eps_block": args.eps_block, "total_episodes": args.episodes})
    env = cm.env_config()
    train = cm.train_config()

    metrics: List[Dict] = []
    model, memory = train_npm(env, train, np.random.default_rng(_seed(args, cm)), on_episode=metrics.append)

    size = write_npm(model, args.out)
    if args.memory:
        save_memory(memory, args.memory)
    if args.metrics:
        write_csv(args.metrics, metrics, ("episode", "epsilon", "loss", "mean_reward", "goodput"))

    tail = metrics[-min(100, len(metrics)):]
    print(f"NPM: {args.out} ({size} bytes, {model.param_count} params)")
    print(f"last {len(tail)} episodes: goodput={mean_of(tail, 'goodput'):.3f} mean_reward={mean_of(tail, 'mean_reward'):.3f}")
    return 0


def cmd_extract(args) -> int:
    cm = _config(args, domain_source=args.domain_source)
    env = cm.env_config()
    options = cm.merge_options()
    model = read_npm(args.npm)
    memory = memory_or_none(args.memory)

    if options.domain_source == DomainSource.GRID:
        domain = StateDomain.grid(model.b_max)
    else:
        domain = observed_state_domain(
            memory, model=model, env_config=env,
            fallback_episodes=options.fallback_episodes, seed=_seed(args, cm),
        )
    graph = extract_graph(model, domain)
    edges, vocab = graph_tables(graph)

    os.makedirs(args.out_dir, exist_ok=True)
    write_csv(os.path.join(args.out_dir, "edges.csv"), edges, ("tail_id", "head_id", "count"))
    write_csv(os.path.join(args.out_dir, "vocabularies.csv"), vocab, ("id", "kind", "ue", "pattern", "payload", "merged"))
    if args.text:
        print(render_graph_text(graph), end="")
    print(
        f"states={len(domain)} ucm={graph.count_of(VocabKind.UCM)} dcm={graph.count_of(VocabKind.DCM)} "
        f"connections={len(graph.connections)}"
    )
    return 0


def cmd_transform(args) -> int:
    cm = _config(
        args, merge_mode=args.merge_mode, weighting=args.weighting,
        domain_source=args.domain_source, grant_free=True if args.grant_free else None,
    )
    env = cm.env_config()
    options = cm.merge_options()

    with open(args.npm, "rb") as f:
        npm_data = f.read()
    model = read_npm(args.npm)
    memory = memory_or_none(args.memory)
    build = construct_spm(model, memory, options, env_config=env, npm_digest=npm_digest(npm_data), seed=_seed(args, cm))

    spm = build.spm
    for problem in normalization_errors(spm):
        logger.warning("spm.unnormalized", detail=problem)
    size = write_spm(spm, args.out, include_vocabulary=args.include_vocabulary)

    counts = spm.vocabulary_counts()
    bits = spm.cm_bits()
    print(f"SPM: {args.out} ({size} bytes, {len(spm)} clauses)")
    print(
        f"UCM {build.extract.count_of(VocabKind.UCM)} -> {counts['ucm']}, "
        f"DCM {build.extract.count_of(VocabKind.DCM)} -> {counts['dcm']}"
    )
    print(f"CM bits: ucm={bits['ucm']} dcm={bits['dcm']}  SPM/NPM size ratio={size / len(npm_data):.4f}")
    return 0


# --- run / reconfigure / entropy / select -------------------------------


def _load_for(protocol: str, model_path: Optional[str]) -> LoadedModels:
    if protocol in ("npm", "spm", "spm_cf"):
        if not model_path:
            raise SpmError(f"protocol {protocol!r} needs --model")
        if protocol == "npm":
            return LoadedModels(npm=read_npm(model_path))
        return LoadedModels(**{protocol: read_spm(model_path)})
    return LoadedModels()


def cmd_run(args) -> int:
    cm = _config(args, **{"lambda": args.lam, "eps_block": args.eps_block})
    env = cm.env_config()
    experiment = cm.experiment_config()
    seed = _seed(args, cm)
    models = _load_for(args.protocol, args.model)
    info = model_info(args.protocol, models)

    traces: List[Dict] = []
    inference_rows: List[Dict] = []
    kpis: List[Dict] = []
    reports = []
    for k in range(args.episodes):
        policy = build_policy(args.protocol, models, experiment)
        trace, report = run_episode(policy, env, derive_rng(seed, k, 0), derive_rng(seed, k, 1))
        report = report.with_model_info(**info)
        reports.append(report)
        kpis.append({"episode": k, **report.as_row()})
        traces.extend({"episode": k, **r} for r in trace.as_records())
        if isinstance(policy, SpmPolicy):
            inference_rows.extend({"episode": k, **r} for r in policy.trace)

    if args.trace:
        write_csv(args.trace, traces, ("episode", *EpisodeTrace.TRACE_COLUMNS))
    if args.inference_trace and inference_rows:
        write_csv(args.inference_trace, inference_rows, ("episode", *INFERENCE_TRACE_COLUMNS))
    if args.kpi:
        write_csv(args.kpi, kpis, ("episode", *KPI_COLUMNS))

    mean = KpiReport.mean(reports)
    print(
        f"{args.protocol}: goodput={mean.goodput:.4f} n_R={mean.n_r:.2f} n_C={mean.n_c:.2f} "
        f"n_D={mean.n_d:.2f} mean_reward={mean.mean_reward:.4f} ({len(reports)} episodes)"
    )
    return 0


def cmd_reconfigure(args) -> int:
    spm = read_spm(args.spm)
    result = reconfigure_collision_free(spm, args.p_th)
    write_spm(result.spm, args.out)
    if args.log:
        write_csv(args.log, [m.as_row() for m in result.log])
    for m in result.log:
        print(f"step {m.step}: b={m.state} UE{m.ue + 1} {m.dcm}: a{m.ue + 1}_A -> a{m.ue + 1}_S (p={m.prob:.4f})")
    print(f"{len(result.log)} manipulation(s); SPM written to {args.out}")
    return 0


def cmd_entropy(args) -> int:
    report = net_entropy(read_spm(args.spm), base=args.base)
    if args.clauses:
        write_csv(args.clauses, report.rows(), ("kind", "head", "tail", "prob", "entropy"))
    print(f"net={report.net:.6f} beta={report.partial_beta:.6f} gamma={report.partial_gamma:.6f} ({report.base})")
    return 0


def cmd_select(args) -> int:
    spms = [read_spm(p) for p in args.spms]
    cm = _config(args)
    seed = _seed(args, cm)

    if args.study:
        env = cm.env_config()
        rewards = []
        for path, spm in zip(args.spms, spms):
            rows = evaluate_policy(spm_policy(spm), env, args.episodes, seed)
            rewards.append(mean_of(rows, "mean_reward"))
            logger.info("select.evaluated", path=path, mean_reward=rewards[-1])
        study = selection_study(spms, rewards, args.subset_size, args.trials, derive_rng(seed, 0x5E1EC7))
        rows = [{"selector": name, **stats} for name, stats in study.items()]
        if args.out:
            write_csv(args.out, rows, ("selector", "mean", "std", "trials"))
        for row in rows:
            print(f"{row['selector']}: mean={row['mean']:.4f} std={row['std']:.4f}")
        return 0

    if args.criterion == "min_entropy":
        chosen = select_min_entropy(spms)
    elif args.criterion == "min_vocabulary":
        chosen = select_min_vocabulary(spms)
    else:
        chosen = select_random(spms, derive_rng(seed, 0x5E1EC7))
    index = next(k for k, spm in enumerate(spms) if spm is chosen)
    print(args.spms[index])
    return 0


# --- portfolio / baseline / policymap / experiment ----------------------


def cmd_portfolio(args) -> int:
    cm = _config(args)
    env = cm.env_config()
    markov = cm.markov_config()
    seed = _seed(args, cm)

    entries = [PortfolioEntry(name, read_spm(path)) for name, path in load_portfolio_file(args.portfolio).items()]
    portfolio = Portfolio(entries, mode=PortfolioMode(args.mode), window=args.window, threshold=args.threshold)
    result = portfolio_run(portfolio, markov, env, seed=seed)
    records = list(result.records)
    series = {f"portfolio ({args.mode})": result.episode_rewards}

    if args.continual is not None:
        continual = continual_learning_run(markov, env, cm.train_config(), args.continual, seed=seed)
        records.extend(continual.records)
        series["continual NPM"] = continual.episode_rewards
        print(f"continual NPM: mean_reward={continual.report.mean_reward:.4f}")

    write_csv(args.out, records, NONSTATIONARY_COLUMNS)
    if args.plot:
        envs = [r["environment"] for r in result.records]
        switches = [k for k in range(1, len(envs)) if envs[k] != envs[k - 1]]
        plot_episode_series(series, args.plot, switches=switches)
    rewards = result.episode_rewards
    print(f"portfolio ({args.mode}): mean_reward={result.report.mean_reward:.4f} min_episode={min(rewards):.4f}")
    return 0


def cmd_baseline(args) -> int:
    cm = _config(args)
    overrides = {"protocols": [args.protocol], "scenario": args.scenario or f"baseline_{args.protocol}"}
    if args.lambdas:
        overrides["lambdas"] = args.lambdas
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    elif cm.get("output_dir") is None:
        overrides["output_dir"] = settings.OUTPUT_DIR
    paths = run_experiment(cm.experiment_config(**overrides), cm.env_config())
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_policymap(args) -> int:
    if not args.npm and not args.spm:
        raise SpmError("policymap needs --npm and/or --spm")
    cm = _config(args)
    maps = {}
    if args.npm:
        maps["npm"] = policy_map_export(read_npm(args.npm))
    if args.spm:
        b_max = args.b_max if args.b_max is not None else cm.env_config().b_max
        maps["spm"] = policy_map_export(read_spm(args.spm), b_max=b_max)

    states = sorted(set.intersection(*(set(m) for m in maps.values())))
    rows = []
    for b1, b2 in states:
        row = {"b1": b1, "b2": b2}
        for name, grid in maps.items():
            cell = grid[(b1, b2)]
            row.update({
                f"{name}_a1": cell["a1"], f"{name}_a2": cell["a2"],
                f"{name}_access1": cell["access1"], f"{name}_access2": cell["access2"],
            })
        rows.append(row)
    write_csv(args.out, rows)

    if len(maps) == 2:
        agreement, mismatched = policy_agreement(maps["npm"], maps["spm"])
        print(f"agreement={agreement:.4f} ({len(states) - len(mismatched)}/{len(states)} states)")
        if mismatched:
            print("disagree at: " + " ".join(f"({b1},{b2})" for b1, b2 in mismatched))
    print(f"policy map: {args.out} ({len(rows)} states)")
    return 0


def cmd_experiment(args) -> int:
    cm = _config(args)
    overrides = {"workers": args.workers}
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    elif cm.get("output_dir") is None:
        overrides["output_dir"] = settings.OUTPUT_DIR
    if cm.get("workers") is None and args.workers is None:
        overrides["workers"] = settings.WORKERS
    if args.plots:
        overrides["plots"] = True
    experiment = cm.experiment_config(**overrides)
    env = cm.env_config()
    if args.describe:
        print(cm.describe(env, experiment), end="")
    paths = run_experiment(experiment, env)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


# --- 引数定義 -----------------------------------------------------------


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="乱数シード（省略時は設定ファイルの seed、なければ0）")
    common.add_argument("--config", default=None, help="key = value 形式の設定ファイル")

    parser = argparse.ArgumentParser(
        description="NPM→SPM 変換パイプラインと MAC プロトコル評価 CLI",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
        epilog="""
使用例:
  # NPMを学習し、エピソード記憶と一緒に保存
  %(prog)s train --out npm.bin --memory memory.bin --metrics train.csv --seed 1

  # NPMをSPMに変換して実行
  %(prog)s transform --npm npm.bin --memory memory.bin --out spm.pl
  %(prog)s run --protocol spm --model spm.pl --episodes 10 --kpi kpi.csv

  # 衝突のないSPMに再構成
  %(prog)s reconfigure --spm spm.pl --p-th 0 --out spm_cf.pl --log reconfigure.csv
""",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="ログレベル (既定: SPM_LOG_LEVEL)")
    parser.add_argument("--log-json", action="store_true", default=settings.LOG_JSON, help="ログをJSONで出力")
    subparsers = parser.add_subparsers(dest="command", required=True, help="サブコマンド")

    p = subparsers.add_parser("train", parents=[common], help="NPMをDQNで学習する")
    p.add_argument("--out", required=True, help="NPM重みファイルの出力先")
    p.add_argument("--memory", help="エピソード記憶の出力先")
    p.add_argument("--metrics", help="エピソードごとの学習指標CSV")
    p.add_argument("--episodes", type=int, default=None, help="学習エピソード数 (total_episodes)")
    p.add_argument("--lambda", dest="lam", default=None, help="到着確率（'0.5' または '0.9,0.1'）")
    p.add_argument("--eps-block", type=float, default=None, help="ブロック誤り率")
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser("extract", parents=[common], help="NPMから語彙と接続を抽出する")
    p.add_argument("--npm", required=True)
    p.add_argument("--memory", help="エピソード記憶（状態ドメインの取得元）")
    p.add_argument("--domain-source", choices=[d.value for d in DomainSource], default=None)
    p.add_argument("--out-dir", required=True, help="edges.csv と vocabularies.csv の出力先")
    p.add_argument("--text", action="store_true", help="段ごとのテキスト表示も出す")
    p.set_defaults(func=cmd_extract)

    p = subparsers.add_parser("transform", parents=[common], help="NPMをSPM (.pl) に変換する")
    p.add_argument("--npm", required=True)
    p.add_argument("--memory")
    p.add_argument("--out", required=True)
    p.add_argument("--merge-mode", choices=[m.value for m in MergeMode], default=None)
    p.add_argument("--weighting", choices=[w.value for w in Weighting], default=None)
    p.add_argument("--domain-source", choices=[d.value for d in DomainSource], default=None)
    p.add_argument("--grant-free", action="store_true", help="δ節（グラントフリー）を追加する")
    p.add_argument("--include-vocabulary", action="store_true", help="語彙パターンをコメントとして書き出す")
    p.set_defaults(func=cmd_transform)

    p = subparsers.add_parser("run", parents=[common], help="プロトコルを環境で実行する")
    p.add_argument("--protocol", choices=KNOWN_PROTOCOLS, required=True)
    p.add_argument("--model", help="npm なら重みファイル、spm/spm_cf なら .pl")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--lambda", dest="lam", default=None)
    p.add_argument("--eps-block", type=float, default=None)
    p.add_argument("--trace", help="サイクルごとのトレースCSV")
    p.add_argument("--inference-trace", help="SPM推論トレースCSV（spm系のみ）")
    p.add_argument("--kpi", help="エピソードごとのKPI CSV")
    p.set_defaults(func=cmd_run)

    p = subparsers.add_parser("reconfigure", parents=[common], help="衝突確率が p_th 以下になるようSPMを書き換える")
    p.add_argument("--spm", required=True)
    p.add_argument("--p-th", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="操作ログCSV")
    p.set_defaults(func=cmd_reconfigure)

    p = subparsers.add_parser("entropy", parents=[common], help="SPMの意味論的エントロピー")
    p.add_argument("--spm", required=True)
    p.add_argument("--base", choices=sorted(LOG_BASES), default="nats")
    p.add_argument("--clauses", help="節ごとのエントロピーCSV")
    p.set_defaults(func=cmd_entropy)

    p = subparsers.add_parser("select", parents=[common], help="SPM群から1つを選ぶ")
    p.add_argument("spms", nargs="+", help="候補の .pl ファイル")
    p.add_argument("--criterion", choices=["min_entropy", "min_vocabulary", "random"], default="min_entropy")
    p.add_argument("--study", action="store_true", help="部分集合からの選択を繰り返して選択器を比較する")
    p.add_argument("--subset-size", type=int, default=20)
    p.add_argument("--trials", type=int, default=300)
    p.add_argument("--episodes", type=int, default=10, help="--study での各SPMの評価エピソード数")
    p.add_argument("--out", help="--study の結果CSV")
    p.set_defaults(func=cmd_select)

    p = subparsers.add_parser("portfolio", parents=[common], help="非定常環境でSPMポートフォリオを運用する")
    p.add_argument("--portfolio", required=True, help="'descriptor = path.pl' 形式のファイル")
    p.add_argument("--mode", choices=[m.value for m in PortfolioMode], default=PortfolioMode.ORACLE.value)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--continual", type=int, default=None, metavar="EPISODES",
                   help="切替ごとにこのエピソード数だけ再学習する継続学習NPMとも比較する")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="エピソード報酬のSVG")
    p.set_defaults(func=cmd_portfolio)

    p = subparsers.add_parser("baseline", parents=[common], help="S-ALOHA / BEB のλスイープ")
    p.add_argument("--protocol", choices=["aloha", "beb"], required=True)
    p.add_argument("--lambdas", type=_float_list, default=None, help="例: 0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--scenario", default=None)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_baseline)

    p = subparsers.add_parser("policymap", parents=[common], help="全状態の行動マップ（NPMとSPMの一致率）")
    p.add_argument("--npm")
    p.add_argument("--spm")
    p.add_argument("--b-max", type=int, default=None, help="SPMのみのときの状態グリッド幅")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_policymap)

    p = subparsers.add_parser("experiment", parents=[common], help="設定ファイルのλ×εスイープを実行する")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--plots", action="store_true", help="goodputのSVGも出力する")
    p.add_argument("--describe", action="store_true", help="有効な設定値を表示する")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level, json_output=args.log_json)
    try:
        return args.func(args)
    except (SpmError, ValidationError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
