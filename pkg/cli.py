"""
Command-line surface: synth, train-gmm, train-nmf, enhance, eval, stats.

Exit codes: 0 success, 1 partial failure or runtime error, 2 usage or configuration error.
"""
import argparse
import logging
import os
import sys
from datetime import datetime

from audio_io import ENHANCE_RATE, read_wav, resample
from dsp_core import stft
from errors import ConfigurationError, ToolkitError
from metrics import TemplateStore
from model_store import load_gmm, load_nmf, model_kind, save_model
from pipeline import (ErrorType, Method, Scope, batch_enhance,
                      evaluate_manifest, read_manifest)
from transforms import (TemplateBank, conversion_cepstra, nmf_activations,
                        train_joint_gmm, train_nmf)
import config
import stimuli
import utils

# Initialize logger
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
ALL_SCOPES = 'all'
STATS_COLUMNS = ['command', 'runs', 'success', 'failure', 'rows', 'rows_failed']


class UsageError(Exception):
    pass


def _split(value):
    return [token.strip() for token in value.split(',') if token.strip()] if value else []


def _configure_logging(level):
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO), format=LOG_FORMAT, force=True)


def _open_ledger(cfg):
    if not cfg.paths.ledger_url:
        return None
    from models import init_db
    return init_db(cfg.paths.ledger_url)


def _training_pairs(manifest, templates):
    """(distorted, healthy) 16 kHz waveforms for every manifest row."""
    store = TemplateStore(templates)
    pairs = []
    for row in read_manifest(manifest):
        if not row.template_id:
            raise UsageError(f"Manifest row {row.wav_path} has no reference template id")
        src = resample(read_wav(row.wav_path), ENHANCE_RATE)
        tgt = resample(read_wav(store.wav_path(row.template_id)), ENHANCE_RATE)
        pairs.append((src, tgt))
    return pairs


def cmd_synth(args, cfg):
    words = _split(args.words)
    for word in words:
        if word not in stimuli.WORD_INVENTORY:
            raise UsageError(f"Unknown word '{word}'; choose from {', '.join(stimuli.WORD_INVENTORY)}")
    try:
        errors = [ErrorType.parse(token) for token in _split(args.errors)]
    except ToolkitError as e:
        raise UsageError(str(e)) from e
    seeds = range(cfg.seed, cfg.seed + args.num_seeds)
    specs = stimuli.corpus_specs(words, errors, seeds, nasal_depth=args.nasal_depth)
    if not specs:
        raise UsageError("No applicable (word, error) combinations")
    files = stimuli.write_corpus(args.out, specs)
    config.write_effective_config(cfg, args.out)
    print(f"manifest: {files.manifest}")
    print(f"healthy manifest: {files.healthy_manifest}")
    print(f"template index: {files.template_index}")
    print(f"template bank: {files.bank_dir}")
    print(f"descriptors: {files.descriptors}")
    return EXIT_OK


def cmd_train_gmm(args, cfg):
    pairs = _training_pairs(args.manifest, args.templates)
    order = cfg.gmm.order
    src = [conversion_cepstra(s, order) for s, _ in pairs]
    tgt = [conversion_cepstra(t, order) for _, t in pairs]
    model, log = train_joint_gmm(src, tgt, num_components=cfg.gmm.num_components, order=order,
                                 include_c0=cfg.gmm.include_c0, max_iter=cfg.gmm.max_iter,
                                 tol=cfg.gmm.tol, seed=cfg.seed)
    print("iteration,log_likelihood")
    for i, value in enumerate(log.log_likelihoods, start=1):
        print(f"{i},{value:.9f}")
    save_model(model, args.out)
    config.write_effective_config(cfg, os.path.dirname(os.path.abspath(args.out)))
    logger.info(f"GMM trained on {log.frames} frames with {model.num_components} component(s)")
    return EXIT_OK


def cmd_train_nmf(args, cfg):
    pairs = _training_pairs(args.manifest, args.templates)
    frame_len, hop = cfg.stft.frame_len, cfg.stft.hop
    src = [stft(s, frame_len, hop) for s, _ in pairs]
    tgt = [stft(t, frame_len, hop) for _, t in pairs]
    dicts = train_nmf(src, tgt, rank=cfg.nmf.rank, seed=cfg.seed)
    # Fit of the first training utterance through the sampled source dictionary
    _, history = nmf_activations(src[0].magnitude.T, dicts.w_src, cfg.nmf.iters)
    print("iteration,kl_divergence")
    for i, value in enumerate(history):
        print(f"{i},{value:.9f}")
    save_model(dicts, args.out)
    config.write_effective_config(cfg, os.path.dirname(os.path.abspath(args.out)))
    return EXIT_OK


def _write_report(report, out_dir, name):
    rows = utils.result_rows(report)
    utils.write_metrics_csv(rows, os.path.join(out_dir, name))
    return rows


def _finish(rows, out_dir, plots_dir):
    summary = utils.summarize(rows)
    utils.write_summary_csv(summary, os.path.join(out_dir, 'summary.csv'))
    if plots_dir:
        from plots import plot_scores
        plot_scores(summary, plots_dir)


def _check_model_kind(path, expected):
    kind = model_kind(path)
    if kind != expected:
        raise ConfigurationError(f"{path} holds a {kind.upper()} model, expected {expected.upper()}")


def cmd_enhance(args, cfg):
    method = Method(cfg.pipeline.method)
    scopes = list(Scope) if args.scope == ALL_SCOPES else [Scope(cfg.pipeline.scope)]

    gmm = nmf = bank = templates = None
    if method is Method.GMM:
        if not cfg.paths.gmm_model:
            raise ConfigurationError("method=gmm requires --gmm")
        _check_model_kind(cfg.paths.gmm_model, 'gmm')
        gmm = load_gmm(cfg.paths.gmm_model, expected_order=cfg.gmm.order)
    elif method is Method.NMF:
        if not cfg.paths.nmf_model:
            raise ConfigurationError("method=nmf requires --nmf")
        _check_model_kind(cfg.paths.nmf_model, 'nmf')
        nmf = load_nmf(cfg.paths.nmf_model, expected_frame_len=cfg.stft.frame_len)
    if cfg.paths.template_bank:
        bank = TemplateBank.load(cfg.paths.template_bank)
    if cfg.paths.template_index:
        templates = TemplateStore(cfg.paths.template_index)

    os.makedirs(args.out, exist_ok=True)
    config.write_effective_config(cfg, args.out)
    settings = config.enhance_settings(cfg)
    ledger = _open_ledger(cfg)

    all_rows = []
    failed = 0
    for scope in scopes:
        started = datetime.utcnow()
        report = batch_enhance(args.manifest, scope=scope, method=method, gmm=gmm, nmf=nmf, bank=bank,
                               templates=templates, out_dir=os.path.join(args.out, 'wav'),
                               settings=settings, jobs=cfg.pipeline.jobs)
        all_rows.extend(_write_report(report, args.out, f"metrics_{scope.value}_{method.value}.csv"))
        failed += len(report.failed)
        if ledger is not None:
            utils.record_run(ledger, 'enhance', report, seed=cfg.seed, scope=scope.value,
                             method=method.value, started_at=started)

    if templates is not None:
        _finish(all_rows, args.out, args.plots)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_eval(args, cfg):
    if not cfg.paths.template_index:
        raise ConfigurationError("eval requires --templates")
    templates = TemplateStore(cfg.paths.template_index)
    os.makedirs(args.out, exist_ok=True)
    config.write_effective_config(cfg, args.out)
    ledger = _open_ledger(cfg)

    started = datetime.utcnow()
    report = evaluate_manifest(args.manifest, templates, scope_label=args.scope_label, jobs=cfg.pipeline.jobs)
    rows = _write_report(report, args.out, 'metrics.csv')
    failed = len(report.failed)
    if ledger is not None:
        utils.record_run(ledger, 'eval', report, seed=cfg.seed, scope=args.scope_label, started_at=started)

    for extra in args.include or []:
        rows.extend(utils.read_metrics_csv(extra))

    if args.normal_reference:
        reference = evaluate_manifest(args.normal_reference, templates, jobs=cfg.pipeline.jobs)
        reference_rows = utils.normal_reference_rows(reference)
        utils.write_metrics_csv(reference_rows, os.path.join(args.out, 'normal_reference.csv'))
        rows.extend(reference_rows)
        failed += len(reference.failed)

    _finish(rows, args.out, args.plots)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_stats(args, cfg):
    ledger = _open_ledger(cfg)
    if ledger is None:
        raise ConfigurationError("stats requires --ledger or CLP_LEDGER_URL")
    stats = utils.get_run_stats(ledger, args.run_command)
    print(",".join(STATS_COLUMNS))
    for command, counts in stats.items():
        print(",".join([command] + [str(counts[key]) for key in STATS_COLUMNS[1:]]))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='clp-enhance', description='Cleft lip and palate speech enhancement toolkit')
    parser.add_argument('--config', help='JSON configuration file')
    parser.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--jobs', type=int, help='parallel rows')
    parser.add_argument('--ledger', help='SQLAlchemy URL of the results ledger')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='generate a synthetic corpus')
    p.add_argument('--out', required=True)
    p.add_argument('--words', default='sasa,kaka,tata,TaTa')
    p.add_argument('--errors', default='GS,PSNAE,PA,velar')
    p.add_argument('--num-seeds', type=int, default=1)
    p.add_argument('--nasal-depth', type=float, default=stimuli.DEFAULT_NASAL_DEPTH)
    p.set_defaults(func=cmd_synth)

    for name, func in (('train-gmm', cmd_train_gmm), ('train-nmf', cmd_train_nmf)):
        p = sub.add_parser(name, help=f"train {name[6:].upper()} conversion model")
        p.add_argument('--manifest', required=True, help='distorted words with reference template ids')
        p.add_argument('--templates', required=True, help='template index CSV')
        p.add_argument('--out', required=True, help='model file')
        if name == 'train-gmm':
            p.add_argument('--components', type=int, dest='gmm_components')
            p.add_argument('--order', type=int, dest='gmm_order')
            p.add_argument('--max-iter', type=int, dest='gmm_max_iter')
        else:
            p.add_argument('--rank', type=int, dest='nmf_rank')
            p.add_argument('--iters', type=int, dest='nmf_iters')
        p.set_defaults(func=func)

    p = sub.add_parser('enhance', help='enhance manifest words')
    p.add_argument('--manifest', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--scope', choices=[s.value for s in Scope] + [ALL_SCOPES])
    p.add_argument('--method', choices=[m.value for m in Method])
    p.add_argument('--gmm')
    p.add_argument('--nmf')
    p.add_argument('--bank', help='template bank directory')
    p.add_argument('--templates', help='template index CSV for scoring')
    p.add_argument('--plots', help='directory for score charts')
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser('eval', help='score words against reference templates')
    p.add_argument('--manifest', required=True)
    p.add_argument('--templates')
    p.add_argument('--out', required=True)
    p.add_argument('--scope-label', default='original')
    p.add_argument('--include', nargs='*', help='metrics CSVs from enhance runs to add to the summary')
    p.add_argument('--normal-reference', help='manifest of healthy words scored against their own templates')
    p.add_argument('--plots', help='directory for score charts')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('stats', help='run counts recorded in the results ledger')
    p.add_argument('--command', dest='run_command', choices=['enhance', 'eval'])
    p.set_defaults(func=cmd_stats)
    return parser


def _overrides(args):
    scope = getattr(args, 'scope', None)
    return {
        'seed': args.seed,
        'log_level': args.log_level,
        'pipeline.jobs': args.jobs,
        'paths.ledger_url': args.ledger,
        'pipeline.scope': None if scope == ALL_SCOPES else scope,
        'pipeline.method': getattr(args, 'method', None),
        'paths.gmm_model': getattr(args, 'gmm', None),
        'paths.nmf_model': getattr(args, 'nmf', None),
        'paths.template_bank': getattr(args, 'bank', None),
        'paths.template_index': getattr(args, 'templates', None),
        'gmm.num_components': getattr(args, 'gmm_components', None),
        'gmm.order': getattr(args, 'gmm_order', None),
        'gmm.max_iter': getattr(args, 'gmm_max_iter', None),
        'nmf.rank': getattr(args, 'nmf_rank', None),
        'nmf.iters': getattr(args, 'nmf_iters', None),
    }


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config.load_config(args.config, overrides=_overrides(args))
    except ConfigurationError as e:
        _configure_logging('INFO')
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_USAGE
    _configure_logging(cfg.log_level)

    try:
        return args.func(args, cfg)
    except (UsageError, ConfigurationError) as e:
        logger.error(f"Error in {args.command}: {str(e)}")
        return EXIT_USAGE
    except (ToolkitError, OSError, ValueError) as e:
        logger.error(f"Error in {args.command}: {str(e)}")
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
