"""
Command-line entry point: data -> teacher -> student -> analysis -> plots.

Exit codes: 0 success, 1 domain or I/O error, 2 usage error. Failures print a
single `ERROR <code>: <message>` line to stderr.
"""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import structlog
from dataclasses_json.undefined import UndefinedParameterError

from . import configure_logging
from .analytics import (DEFAULT_THRESHOLD, agreement_with_final, checkpoint_agreement, checkpoint_set_overlap,
                        consecutive_agreement, normalized_routing_entropy, teacher_student_agreement, trace_summary)
from .datasets import generate_synthetic, load_dataset_dir
from .errors import ConfigError, TGRError, UsageError
from .models import ModelConfig, SyntheticSpec, TrainConfig, UPPER_BOUND_VARIANTS
from .plotting import emit_plot_data, merge_series, metrics_series, render_csv
from .teacher import load_teacher_bundle, pretrain_teacher, save_teacher
from .trace import RoutingTrace, read_trace
from .training import (collect_routing, evaluate_checkpoint, load_student, probe_indices, read_metrics,
                       run_training, train_upper_bound)

logger = structlog.get_logger()

DEFAULT_OUT = "runs"
SWEEP_VARIANTS = ("vmoe", "tgr")


class TGRArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='Override the seed of the config')
    common.add_argument('--config', default=None, help='JSON config file')
    common.add_argument('--out-dir', default=os.getenv('TGR_OUT', DEFAULT_OUT), help='Output directory')
    common.add_argument('--quiet', action='store_true', help='Only log warnings and errors')
    return common


def build_parser() -> TGRArgumentParser:
    common = _common_parser()
    parser = TGRArgumentParser(prog="tgr", description="Teacher-guided routing MoE lab")
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('gen-data', parents=[common], help='Generate a synthetic dataset')
    p.add_argument('--spec', default=None, help='SyntheticSpec JSON (defaults to the built-in task)')
    task = p.add_mutually_exclusive_group()
    task.add_argument('--default', action='store_true', help='Use the built-in default task')
    task.add_argument('--transfer', action='store_true', help='Use the second-phase transfer task defaults')

    p = sub.add_parser('train-teacher', parents=[common], help='Pretrain and freeze a dense teacher')
    p.add_argument('--data', required=True, help='Dataset directory')
    p.add_argument('--epochs', type=int, default=None, help='Default 30')
    p.add_argument('--batch-size', type=int, default=None, help='Default 64')
    p.add_argument('--lr', type=float, default=None, help='Default 5e-4')

    p = sub.add_parser('train', parents=[common], help='Train one variant')
    p.add_argument('--data', default=None, help='Dataset directory (overrides data_dir)')
    p.add_argument('--teacher', default=None, help='Teacher checkpoint (overrides teacher_checkpoint)')
    p.add_argument('--epochs', type=int, default=None)

    p = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--routing', choices=['student', 'teacher'], default=None)
    p.add_argument('--entropy', choices=['frequency', 'probability'], default='frequency')

    p = sub.add_parser('analyze', parents=[common], help='Routing analytics')
    p.add_argument('analysis', choices=['agreement', 'entropy', 'summary', 'teacher-student', 'checkpoint-agreement'])
    p.add_argument('--trace', default=None)
    p.add_argument('--mode', choices=['final', 'consecutive'], default='final')
    p.add_argument('--stride', type=int, default=5)
    p.add_argument('--epoch', type=int, default=None)
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--other', default=None, help='Second checkpoint for checkpoint-agreement')
    p.add_argument('--data', default=None)
    p.add_argument('--probe-size', type=int, default=512)
    p.add_argument('--out', default=None, help='CSV destination (stdout when omitted)')
    p.add_argument('--layers', type=_int_list, default=None, help='MoE block indices of the traced layers')
    p.add_argument('--threshold', type=float, default=DEFAULT_THRESHOLD, help='Agreement level for summary')
    p.add_argument('--set-overlap', action='store_true',
                   help='checkpoint-agreement: compare top-K sets instead of top-1 experts')

    p = sub.add_parser('sweep', parents=[common], help='Expert-count sweep over vmoe and tgr')
    p.add_argument('--experts', type=_int_list, default=[2, 4, 8, 16])
    p.add_argument('--seeds', type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument('--variants', default=",".join(SWEEP_VARIANTS))
    p.add_argument('--data', default=None)
    p.add_argument('--jobs', type=int, default=1)
    p.add_argument('--stride', type=int, default=5)

    p = sub.add_parser('plot', parents=[common], help='Emit plot data from metrics or a trace')
    p.add_argument('--metrics', default=None)
    p.add_argument('--trace', default=None)
    p.add_argument('--stride', type=int, default=5)
    p.add_argument('--format', choices=['csv', 'svg'], default='csv')
    p.add_argument('--out', required=True)
    p.add_argument('--title', default='')
    return parser


# --- helpers ---------------------------------------------------------------------

RUN_ECHO_KEYS = {'command', 'arguments', 'config'}


def _read_json(path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e


def read_config_payload(path) -> Dict[str, Any]:
    """Config JSON from a plain config file or from the `config` field of a run.json echo."""
    data = _read_json(path)
    if isinstance(data, dict) and set(data) == RUN_ECHO_KEYS:
        if not isinstance(data['config'], dict):
            raise ConfigError(f"{path}: run.json of '{data['command']}' carries no config")
        return data['config']
    return data


def load_train_config(path) -> TrainConfig:
    try:
        return TrainConfig.from_dict(read_config_payload(path))
    except (UndefinedParameterError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def write_run_echo(out_dir, command: str, args: argparse.Namespace, config: Optional[Dict[str, Any]]) -> Path:
    """
    Write run.json: the command, its arguments and the fully resolved config.

    Passing the file back as --config re-runs with the same config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arguments = {k: v for k, v in sorted(vars(args).items()) if k != 'func'}
    echo = {'command': command, 'arguments': arguments, 'config': config}
    path = out_dir / "run.json"
    path.write_text(json.dumps(echo, sort_keys=True, indent=2, default=str) + "\n", encoding='utf-8')
    return path


def _emit_csv(series, out: Optional[str]) -> None:
    if out:
        emit_plot_data(series, out, fmt="csv")
    else:
        sys.stdout.write(render_csv(series))


def _resolve_train_config(args) -> TrainConfig:
    if not args.config:
        raise UsageError(f"{args.command} requires --config")
    config = load_train_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, 'data', None):
        config.data_dir = args.data
    if getattr(args, 'teacher', None):
        config.teacher_checkpoint = args.teacher
    if getattr(args, 'epochs', None):
        config.epochs = args.epochs
    if not config.data_dir:
        raise UsageError(f"{args.command} needs --data or data_dir in the config")
    return config.validate()


# --- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.spec:
        try:
            spec = SyntheticSpec.from_dict(read_config_payload(args.spec))
        except (UndefinedParameterError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{args.spec}: {e}") from e
    else:
        spec = SyntheticSpec.transfer_default() if args.transfer else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    write_run_echo(args.out_dir, args.command, args, spec.to_dict())
    splits = generate_synthetic(spec, args.out_dir)
    print(json.dumps({'out_dir': str(args.out_dir), 'train': len(splits.train), 'val': len(splits.val)}))
    return 0


TEACHER_RUN_DEFAULTS = {'epochs': 30, 'seed': 0, 'batch_size': 64, 'lr': 5e-4}


def cmd_train_teacher(args) -> int:
    dataset = load_dataset_dir(args.data)
    run = dict(TEACHER_RUN_DEFAULTS)
    if args.config:
        payload = read_config_payload(args.config)
        if 'model' in payload:
            run.update({key: payload[key] for key in TEACHER_RUN_DEFAULTS if payload.get(key) is not None})
            payload = payload['model']
        try:
            config = ModelConfig.from_dict(payload)
        except (UndefinedParameterError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{args.config}: {e}") from e
    else:
        config = ModelConfig.teacher_default()
        config.tokens_per_sample = dataset.train.tokens_per_sample
        config.input_dim = dataset.train.token_dim
        config.num_classes = dataset.train.num_classes
    config.validate()
    run.update({key: getattr(args, key) for key in TEACHER_RUN_DEFAULTS if getattr(args, key) is not None})
    write_run_echo(args.out_dir, args.command, args, {'model': config.to_dict(), **run})
    model, provenance = pretrain_teacher(config, dataset, run['epochs'], run['seed'], batch_size=run['batch_size'],
                                         base_lr=run['lr'])
    path = save_teacher(model, provenance, Path(args.out_dir) / "teacher")
    print(json.dumps({'checkpoint': str(path), **provenance.to_dict()}))
    return 0


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    write_run_echo(args.out_dir, args.command, args, config.to_dict())
    dataset = load_dataset_dir(config.data_dir)
    if config.variant in UPPER_BOUND_VARIANTS:
        teacher = load_teacher_bundle(config.teacher_checkpoint, config.model, config.seed,
                                      config.teacher_feature_layer)
        result, reports = train_upper_bound(config, dataset, teacher, args.out_dir)
        summary = {mode: report.to_summary() for mode, report in reports.items()}
    else:
        result = run_training(config, dataset, args.out_dir)
        summary = {'val_accuracy': result.val_accuracy}
    summary.update({'checkpoint': str(result.checkpoint), 'metrics': str(result.metrics),
                    'trace': str(result.trace) if result.trace else None,
                    'seconds_per_epoch': result.seconds_per_epoch, 'trainable_params': result.trainable_params})
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset_dir(args.data)
    report = evaluate_checkpoint(args.checkpoint, dataset.val, args.routing, args.entropy)
    write_run_echo(args.out_dir, args.command, args, load_student(args.checkpoint).config.to_dict())
    print(report.to_json(sort_keys=True))
    return 0


def _probe_tokens(config: TrainConfig, data_dir: str, probe_size: int) -> np.ndarray:
    dataset = load_dataset_dir(data_dir)
    config.probe_set_size = probe_size
    return dataset.val.tokens[probe_indices(config, dataset.val)]


def load_trace_with_layers(path, layers: Optional[Sequence[int]] = None) -> RoutingTrace:
    """
    Read a trace and label its rows with MoE block indices: --layers when given,
    else moe_layers from the summary.json of the run that wrote it, else positions 1..L.
    """
    if layers is None:
        summary = Path(path).parent / "summary.json"
        if summary.exists():
            layers = json.loads(summary.read_text(encoding='utf-8')).get('moe_layers')
    if layers is None:
        logger.warning("trace_layers_unknown", trace=str(path), labels="positions")
    return read_trace(path, layer_ids=layers)


def cmd_analyze(args) -> int:
    write_run_echo(args.out_dir, args.command, args, None)
    if args.set_overlap and args.analysis != 'checkpoint-agreement':
        raise UsageError("--set-overlap applies to checkpoint-agreement only; traces hold top-1 ids")
    if args.analysis in ('agreement', 'entropy', 'summary'):
        if not args.trace:
            raise UsageError(f"analyze {args.analysis} requires --trace")
        trace = load_trace_with_layers(args.trace, args.layers)
        if args.analysis == 'summary':
            summary = trace_summary(trace, args.stride, args.threshold)
            print(json.dumps(summary, sort_keys=True))
            return 0
        if args.analysis == 'agreement':
            if args.mode == 'final':
                series = {'agreement_final': agreement_with_final(trace)}
            else:
                series = {'agreement_consecutive': consecutive_agreement(trace, args.stride)}
        else:
            epoch = args.epoch if args.epoch is not None else trace.epochs[-1]
            ids = trace.snapshot(epoch)
            series = {'normalized_entropy': {layer: normalized_routing_entropy(ids[i], trace.num_experts)
                                             for i, layer in enumerate(trace.layer_ids)}}
        _emit_csv(series, args.out)
        return 0

    if not args.checkpoint or not args.data:
        raise UsageError(f"analyze {args.analysis} requires --checkpoint and --data")
    loaded = load_student(args.checkpoint)
    probe = _probe_tokens(loaded.config, args.data, args.probe_size)
    if args.analysis == 'teacher-student':
        teacher = loaded.teacher_bundle()
        if teacher is None:
            raise ConfigError(f"{args.checkpoint} carries no teacher routers")
        collection = collect_routing(loaded.model, probe, "student", teacher)
        series = {'teacher_student_agreement': teacher_student_agreement(collection.student_top1,
                                                                         collection.teacher_top1)}
    else:
        if not args.other:
            raise UsageError("analyze checkpoint-agreement requires --other")
        other = load_student(args.other)
        before = collect_routing(loaded.model, probe, "student")
        after = collect_routing(other.model, probe, "student")
        if args.set_overlap:
            series = {'checkpoint_set_overlap': checkpoint_set_overlap(before.topk, after.topk)}
        else:
            series = {'checkpoint_agreement': checkpoint_agreement(before.student_top1, after.student_top1)}
    _emit_csv(series, args.out)
    return 0


SWEEP_FIELDS = ['experts', 'variant', 'seed', 'val_accuracy', 'mean_consecutive_agreement', 'epochs_to_threshold']


def run_sweep_arm(arm: Dict[str, Any]) -> Dict[str, Any]:
    """Train one (experts, variant, seed) arm; top-level so worker processes can import it."""
    config = TrainConfig.from_dict(arm['config'])
    dataset = load_dataset_dir(config.data_dir)
    result = run_training(config, dataset, arm['out_dir'])
    row = {'experts': config.model.num_experts, 'variant': config.variant, 'seed': config.seed,
           'val_accuracy': result.val_accuracy, 'mean_consecutive_agreement': float('nan'),
           'epochs_to_threshold': None}
    if result.trace is not None:
        summary = trace_summary(read_trace(result.trace, config.model.moe_layers), arm['stride'])
        row['mean_consecutive_agreement'] = summary['mean_consecutive_agreement']
        row['epochs_to_threshold'] = summary['epochs_to_threshold']
    return row


def sweep(base: TrainConfig, experts: Sequence[int], seeds: Sequence[int], out_dir,
          variants: Sequence[str] = SWEEP_VARIANTS, jobs: int = 1, stride: int = 5) -> List[Dict[str, Any]]:
    """
    Run every (experts, variant, seed) arm and write sweep.csv.

    Returns:
        One row per arm, in experts-variant-seed order
    """
    arms = []
    for num_experts in experts:
        for variant in variants:
            for seed in seeds:
                config = TrainConfig.from_dict(base.to_dict())
                config.variant = variant
                config.seed = seed
                config.model.num_experts = num_experts
                config.model.top_k = min(config.model.top_k, num_experts)
                config.validate()
                arms.append({'config': config.to_dict(), 'stride': stride,
                             'out_dir': str(Path(out_dir) / f"E{num_experts:02d}_{variant}_seed{seed}")})
    logger.info("sweep_started", arms=len(arms), jobs=jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_sweep_arm, arms))
    else:
        rows = [run_sweep_arm(arm) for arm in arms]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_sweep(args) -> int:
    config = _resolve_train_config(args)
    variants = [v.strip() for v in args.variants.split(',') if v.strip()]
    if args.jobs <= 0:
        raise UsageError("--jobs must be positive")
    write_run_echo(args.out_dir, args.command, args, config.to_dict())
    rows = sweep(config, args.experts, args.seeds if args.seed is None else [args.seed], args.out_dir,
                 variants, args.jobs, args.stride)
    print(json.dumps({'rows': len(rows), 'table': str(Path(args.out_dir) / "sweep.csv")}))
    return 0


def cmd_plot(args) -> int:
    if bool(args.metrics) == bool(args.trace):
        raise UsageError("plot needs exactly one of --metrics or --trace")
    write_run_echo(args.out_dir, args.command, args, None)
    if args.metrics:
        series = metrics_series(read_metrics(args.metrics))
        x_label = "step"
    else:
        trace = load_trace_with_layers(args.trace)
        series = merge_series({'agreement_final': agreement_with_final(trace)},
                              {'agreement_consecutive': consecutive_agreement(trace, args.stride)})
        x_label = "epoch"
    emit_plot_data(series, args.out, args.format, title=args.title, x_label=x_label)
    return 0


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train-teacher': cmd_train_teacher,
    'train': cmd_train,
    'eval': cmd_eval,
    'analyze': cmd_analyze,
    'sweep': cmd_sweep,
    'plot': cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run the subcommand and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.quiet:
            configure_logging(level="WARNING")
        return COMMANDS[args.command](args)
    except UsageError as e:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"ERROR {e.code}: {e}\n")
        return 2
    except TGRError as e:
        sys.stderr.write(f"ERROR {e.code}: {e}\n")
        return 1
    except OSError as e:
        sys.stderr.write(f"ERROR io: {e}\n")
        return 1
