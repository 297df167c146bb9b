#!/usr/bin/env python3
"""
SketchReg command-line front end

    python src/sketchreg_cli.py sketch    --input data.csv --method cw --epsilon 0.2 --output data.skrg
    python src/sketchreg_cli.py merge     part0.skrg part1.skrg --output all.skrg
    python src/sketchreg_cli.py posterior --sketch all.skrg --prior uniform --sigma estimate --n 100000 --output post.csv
    python src/sketchreg_cli.py verify    --data data.csv --sketch all.skrg --epsilon 0.3
    python src/sketchreg_cli.py simulate  --n 50000 --d 50 --sigma 5 --output sim.csv
    python src/sketchreg_cli.py bench     --methods cw srht gram --sizes 100000 200000 400000

Every command writes <output>.manifest.json and exits 0 on success, 2 on a
contract violation, 3 on an I/O error and 4 on a numerical failure.
"""

import argparse
import datetime
import hashlib
import json
import logging
import sys
import time
import tracemalloc
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import pytz

from bayes_utils import ESTIMATE, PriorSpec, export_posterior, fit_posterior, posterior_from_gram
from data_utils import (
    BinaryWriter,
    SimConfig,
    export_tables,
    read_binary,
    read_csv,
    read_matrix,
    read_updates,
    read_vector,
    simulate_blocks,
    simulate_parameters,
    write_csv,
)
from metrics_utils import instability_report, verify_all
from sketch_utils import (
    SketchMethod,
    export_sketch_csv,
    finalize,
    merge,
    new_builder,
    read_sketch,
    sketch_blocks,
    split_sketch,
    target_dimension,
    write_sketch,
)
from sketchreg_config import get_config
from sketchreg_errors import EXIT_IO, EXIT_OK, EXIT_VIOLATION, ContractViolation, SketchIOError, SketchRegError, error_result

logger = logging.getLogger('sketchreg')


@dataclass
class RunManifest:
    """Everything needed to re-run a command: flags, seed, input digests, timings, outputs"""
    command: str
    flags: dict
    seed: int = None
    input_digests: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    created_utc: str = None

    @contextmanager
    def timed(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.add_time(name, time.perf_counter() - t0)

    def add_time(self, name, seconds):
        self.timings_ms[name] = self.timings_ms.get(name, 0.0) + seconds * 1000.0

    def digest(self, path):
        self.input_digests[path] = file_digest(path)

    def write(self, path):
        self.created_utc = datetime.datetime.now(pytz.UTC).isoformat()
        try:
            with open(path, 'w') as f:
                json.dump(asdict(self), f, indent=2, default=str)
        except OSError as e:
            raise SketchIOError(f"cannot write manifest {path}: {e}") from e
        return path


def file_digest(path):
    h = hashlib.sha256()
    try:
        with open(path, 'rb') as f:
            for chunk in iter(lambda: f.read(1 << 20), b''):
                h.update(chunk)
    except OSError as e:
        raise SketchIOError(f"cannot read {path}: {e}")
    return h.hexdigest()


def _manifest_for(args):
    flags = {key: value for key, value in vars(args).items() if key not in ('handler',)}
    return RunManifest(command=args.command, flags=flags, seed=getattr(args, 'seed', None))


def _timed_blocks(blocks, manifest, name='read'):
    """Charge the time spent producing each block to manifest.timings_ms[name]"""
    iterator = iter(blocks)
    while True:
        t0 = time.perf_counter()
        try:
            item = next(iterator)
        except StopIteration:
            manifest.add_time(name, time.perf_counter() - t0)
            return
        manifest.add_time(name, time.perf_counter() - t0)
        yield item


def _open_stream(path, fmt, has_header=False, add_intercept=False, d_total=None, n_hint=None):
    if fmt == 'csv':
        return read_csv(path, has_header=has_header, add_intercept=add_intercept)
    if fmt == 'bin':
        return read_binary(path, add_intercept=add_intercept)
    if add_intercept:
        raise ContractViolation("--add-intercept does not apply to update streams")
    if d_total is None:
        raise ContractViolation("update streams need --d-total")
    return read_updates(path, d_total, n_hint=n_hint)


def _offset_blocks(blocks, offset):
    for start, rows in blocks:
        yield start + offset, rows


def _offset_updates(batches, offset):
    for i, j, u in batches:
        yield i + offset, j, u


def _resolve_k(args, method, d_total, n_hint):
    if method is SketchMethod.GRAM:
        if args.epsilon is not None or args.k is not None:
            print("⚠️  gram sketch ignores --epsilon/--k; k = d_total - 1")
            logger.warning("gram sketch ignores --epsilon/--k")
        return None
    if args.k is not None:
        return args.k
    if args.epsilon is None:
        raise ContractViolation("one of --epsilon or --k is required")
    return target_dimension(method, d_total, args.epsilon, alpha=args.alpha, d_var=args.d_var,
                            strict=args.strict, n=n_hint)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_sketch(args):
    """Stream the input once and write an SKRG sketch"""
    manifest = _manifest_for(args)
    method = SketchMethod.from_name(args.method)
    stream = _open_stream(args.input, args.format, args.has_header, args.add_intercept,
                          args.d_total, args.n_hint)
    if args.row_offset < 0:
        raise ContractViolation(f"--row-offset must be non-negative, got {args.row_offset}")
    n_hint = args.n_hint
    if n_hint is None and stream.kind == 'bin' and method is SketchMethod.SRHT:
        n_hint = stream.n_hint + args.row_offset
    if method is SketchMethod.SRHT and n_hint is None:
        raise ContractViolation("srht needs --n-hint (an upper bound on the row count)")
    k = _resolve_k(args, method, stream.width, n_hint)
    print(f"🚀 Sketching {args.input} with {method.name} (k={k if k is not None else stream.width - 1})")
    template = new_builder(method, stream.width, k, n_hint=n_hint, seed=args.seed, block_mode=args.block_mode)
    with manifest.timed('total'):
        if stream.kind == 'updates':
            builder = template
            batches = _offset_updates(_timed_blocks(stream.iter_updates(), manifest), args.row_offset)
            for i, j, u in batches:
                builder.push_updates(i, j, u)
        else:
            blocks = _offset_blocks(_timed_blocks(stream.iter_blocks(), manifest), args.row_offset)
            builder = sketch_blocks(template, blocks, threads=get_config('threads'))
    manifest.timings_ms['sketch'] = manifest.timings_ms['total'] - manifest.timings_ms.get('read', 0.0)
    with manifest.timed('write'):
        write_sketch(builder, args.output)
    manifest.outputs.append(args.output)
    if args.csv_export:
        export_sketch_csv(builder, args.csv_export)
        manifest.outputs.append(args.csv_export)
    manifest.digest(args.input)
    manifest.write(args.output + '.manifest.json')
    print(f"✅ Wrote {args.output}: k={builder.k}, d_total={builder.d_total}, rows={builder.rows_seen}")
    return {'success': True, 'k': builder.k, 'rows_seen': builder.rows_seen, 'output': args.output}


def cmd_merge(args):
    """Sum sketches of disjoint parts of one stream"""
    manifest = _manifest_for(args)
    with manifest.timed('merge'):
        merged = read_sketch(args.inputs[0])
        for path in args.inputs[1:]:
            merged = merge(merged, read_sketch(path))
    for path in args.inputs:
        manifest.digest(path)
    manifest.seed = merged.seed.master
    write_sketch(merged, args.output)
    manifest.outputs.append(args.output)
    manifest.write(args.output + '.manifest.json')
    print(f"✅ Merged {len(args.inputs)} sketches into {args.output} ({merged.rows_seen} rows)")
    return {'success': True, 'rows_seen': merged.rows_seen, 'output': args.output}


def _prior_from_args(args):
    if args.prior == 'uniform':
        return PriorSpec.uniform(args.sigma)
    if not (args.prior_mean and args.prior_s):
        raise ContractViolation("a gaussian prior needs --prior-mean and --prior-s")
    return PriorSpec.gaussian(read_vector(args.prior_mean), read_matrix(args.prior_s), args.sigma)


def cmd_posterior(args):
    """Closed-form posterior on a sketch"""
    manifest = _manifest_for(args)
    with manifest.timed('read'):
        builder = read_sketch(args.sketch)
        prior = _prior_from_args(args)
    manifest.digest(args.sketch)
    manifest.seed = builder.seed.master
    with manifest.timed('solve'):
        if builder.method is SketchMethod.GRAM:
            measure = posterior_from_gram(finalize(builder), prior, args.sigma)
            sigma = prior.sigma
        else:
            n = args.n
            if n is None and args.sigma == ESTIMATE:
                if builder.rows_seen == 0:
                    raise ContractViolation("the sketch has no row count (turnstile input?); pass --n")
                n = builder.rows_seen
                logger.info("--n not given; using the %d rows the sketch has seen", n)
            PiX, PiY = split_sketch(finalize(builder))
            measure, sigma = fit_posterior(PiX, PiY, prior, n=n, sigma=args.sigma)
    with manifest.timed('write'):
        written = export_posterior(measure, args.output, fmt=args.export_format)
    manifest.outputs.extend(written)
    manifest.flags['sigma_used'] = sigma
    manifest.write(args.output + '.manifest.json')
    print(f"📊 Posterior over {measure.d} coefficients (sigma={sigma:.6g})")
    print(f"✅ Wrote {', '.join(written)}")
    return {'success': True, 'sigma': sigma, 'outputs': written}


def cmd_verify(args):
    """Check the embedding and every posterior bound against the original data"""
    manifest = _manifest_for(args)
    with manifest.timed('read'):
        data = _open_stream(args.data, args.format, args.has_header, args.add_intercept).to_matrix()
        builder = read_sketch(args.sketch)
        prior = _prior_from_args(args)
    manifest.digest(args.data)
    manifest.digest(args.sketch)
    manifest.seed = builder.seed.master
    if builder.method is SketchMethod.GRAM:
        raise ContractViolation("a gram sketch is not an embedding; use --instability on the data instead")
    if builder.d_total != data.shape[1]:
        raise ContractViolation(f"sketch has {builder.d_total} columns but the data has {data.shape[1]}")
    X, Y = data[:, :-1], data[:, -1]
    sketch = finalize(builder)
    with manifest.timed('solve'):
        sigma = prior.sigma
        if sigma == ESTIMATE:
            PiX, PiY = split_sketch(sketch)
            _, sigma = fit_posterior(PiX, PiY, prior, n=data.shape[0])
        reports = verify_all(X, Y, sketch, prior, args.epsilon, sigma)
        if args.instability:
            reports.append(instability_report(X, Y, seed=builder.seed.master))
    for report in reports:
        record = report.to_dict()
        ok = record.get('pass', record.get('satisfied', record.get('squaring_holds', True)))
        print(f"{'✅' if ok in (True, None) else '❌'} {record['check']}")
        print(report.to_text())
    if args.output:
        with open(args.output, 'w') as f:
            json.dump([report.to_dict() for report in reports], f, indent=2, default=str)
        manifest.outputs.append(args.output)
        manifest.write(args.output + '.manifest.json')
    else:
        manifest.write(args.sketch + '.verify.manifest.json')
    records = [r.to_dict() for r in reports]
    failed = [record['check'] for record in records if not record.get('pass', record.get('satisfied', True))]
    result = {'success': True, 'all_satisfied': not failed, 'reports': records}
    if failed and args.fail_on_violation:
        result.update(success=False, exit_code=EXIT_VIOLATION, error=f"checks not satisfied: {', '.join(failed)}")
    return result


def cmd_simulate(args):
    """Generate a synthetic regression dataset [X, Y] plus its true coefficients"""
    manifest = _manifest_for(args)
    cfg = SimConfig(n=args.n, d=args.d, sigma=args.sigma, seed=args.seed, zero_inflation=args.zero_inflation,
                    poisson_mean=args.poisson_mean, col_mean_sd=args.col_mean_sd, x_var=args.x_var,
                    add_intercept=args.add_intercept)
    beta = simulate_parameters(cfg)[0]
    d_total = beta.shape[0] + 1
    print(f"🚀 Simulating n={cfg.n}, d={cfg.d}, sigma={cfg.sigma} into {args.output}")
    with manifest.timed('simulate'):
        if args.format == 'bin':
            with BinaryWriter(args.output, d_total) as writer:
                for _, X, Y in simulate_blocks(cfg):
                    writer.write(np.column_stack([X, Y]))
        else:
            header = [f'x{j}' for j in range(d_total - 1)] + ['y'] if args.header else None
            with open(args.output, 'w') as f:
                for start, X, Y in simulate_blocks(cfg):
                    frame = pd.DataFrame(np.column_stack([X, Y]))
                    frame.to_csv(f, index=False, header=header if start == 0 and header else False,
                                 float_format='%.17g')
    beta_path = args.beta_output or args.output + '.beta.csv'
    write_csv(beta.reshape(-1, 1), beta_path)
    manifest.outputs.extend([args.output, beta_path])
    manifest.write(args.output + '.manifest.json')
    print(f"✅ Wrote {args.output} and {beta_path}")
    return {'success': True, 'd_total': d_total, 'outputs': [args.output, beta_path]}


def _bench_source(args, n):
    """(d_total, row count, block factory); simulated data is generated once per size"""
    if args.input:
        stream = read_binary(args.input)
        return stream.width, stream.n_hint, stream.iter_blocks
    cfg = SimConfig(n=n, d=args.d, sigma=1.0, seed=args.seed)
    blocks = [(start, np.column_stack([X, Y])) for start, X, Y in simulate_blocks(cfg)]
    return args.d + 1, n, lambda: iter(blocks)


def cmd_bench(args):
    """Read/sketch timings per method over a size ladder"""
    manifest = _manifest_for(args)
    sizes = [None] if args.input else args.sizes
    rows = []
    for n in sizes:
        d_total, n_rows, make_blocks = _bench_source(args, n)
        for name in args.methods:
            method = SketchMethod.from_name(name)
            if method is SketchMethod.GRAM:
                k = None
            elif args.k is not None:
                k = args.k
            else:
                k = target_dimension(method, d_total, args.epsilon, d_var=d_total - 1)
            if args.trace_memory:
                tracemalloc.start()
            builder = new_builder(method, d_total, k, n_hint=n_rows, seed=args.seed,
                                  block_mode=method is SketchMethod.SRHT)
            timing = RunManifest(command='bench', flags={})
            t0 = time.perf_counter()
            for start, block in _timed_blocks(make_blocks(), timing):
                builder.push_rows(start, block)
            total = time.perf_counter() - t0
            peak = None
            if args.trace_memory:
                peak = tracemalloc.get_traced_memory()[1]
                tracemalloc.stop()
            read_ms = timing.timings_ms.get('read', 0.0)
            row = {'method': method.name.lower(), 'n': builder.rows_seen, 'd_total': d_total, 'k': builder.k,
                   'read_ms': read_ms, 'sketch_ms': total * 1000.0 - read_ms}
            if peak is not None:
                row['peak_bytes'] = peak
                row['peak_ratio'] = peak / (builder.k * d_total * 8)
            rows.append(row)
            print(f"📊 {row['method']:5s} n={row['n']:>9d} k={row['k']:>6d} sketch={row['sketch_ms']:.1f} ms")
    frame = pd.DataFrame(rows)
    frame['scaling'] = scaling_ratios(frame)
    written = export_tables({'timings': frame}, args.output, fmt=args.export_format)
    manifest.outputs.extend(written)
    manifest.timings_ms = {f"{r['method']}@{r['n']}": r['sketch_ms'] for r in rows}
    manifest.write(args.output + '.manifest.json')
    print(f"✅ Wrote {', '.join(written)}")
    return {'success': True, 'rows': rows, 'outputs': written}


def scaling_ratios(frame):
    """sketch_ms divided by the same method's previous (smaller) size on the ladder"""
    if frame.empty:
        return pd.Series(dtype=float)
    previous = frame.groupby('method')['sketch_ms'].shift(1)
    return frame['sketch_ms'] / previous


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_prior_flags(p):
    p.add_argument('--prior', choices=['uniform', 'gaussian'], default='uniform')
    p.add_argument('--prior-mean', help='CSV with the prior mean m')
    p.add_argument('--prior-s', help='CSV with the d x d prior matrix S, covariance sigma^2 (S^T S)^-1')
    p.add_argument('--sigma', default=ESTIMATE, help='noise scale, or "estimate" for the plug-in estimate')


def build_parser():
    parser = argparse.ArgumentParser(prog='sketchreg',
                                     description='Streaming subspace-embedding sketches for Bayesian regression')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('sketch', help='sketch a data file in one pass')
    p.add_argument('--input', required=True)
    p.add_argument('--format', choices=['csv', 'bin', 'updates'], default='csv')
    p.add_argument('--method', choices=['rad', 'srht', 'cw', 'gram'], required=True)
    size = p.add_mutually_exclusive_group()
    size.add_argument('--epsilon', type=float)
    size.add_argument('--k', type=int)
    p.add_argument('--alpha', type=float, default=get_config('default_alpha'))
    p.add_argument('--d-var', type=int, help='variable count for CW sizing (default d_total)')
    p.add_argument('--strict', action='store_true', help='theoretical sizing (uses alpha)')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--n-hint', type=int)
    p.add_argument('--row-offset', type=int, default=0,
                   help='global index of the first input row, for sketching one partition of a larger stream')
    p.add_argument('--d-total', type=int, help='column count for update streams')
    p.add_argument('--add-intercept', action='store_true')
    p.add_argument('--has-header', action='store_true')
    p.add_argument('--block-mode', action='store_true', help='SRHT block FWHT accumulation')
    p.add_argument('--csv-export')
    p.add_argument('--output', required=True)
    p.set_defaults(handler=cmd_sketch)

    p = sub.add_parser('merge', help='merge sketches of disjoint row ranges')
    p.add_argument('inputs', nargs='+')
    p.add_argument('--output', required=True)
    p.set_defaults(handler=cmd_merge)

    p = sub.add_parser('posterior', help='Gaussian posterior on a sketch')
    p.add_argument('--sketch', required=True)
    _add_prior_flags(p)
    p.add_argument('--n', type=int, help='original row count (for --sigma estimate)')
    p.add_argument('--export-format', choices=list(get_config('export_formats')), default='csv')
    p.add_argument('--output', required=True)
    p.set_defaults(handler=cmd_posterior)

    p = sub.add_parser('verify', help='certify a sketch against its data')
    p.add_argument('--data', required=True)
    p.add_argument('--format', choices=['csv', 'bin'], default='csv')
    p.add_argument('--has-header', action='store_true')
    p.add_argument('--add-intercept', action='store_true')
    p.add_argument('--sketch', required=True)
    p.add_argument('--epsilon', type=float, required=True)
    _add_prior_flags(p)
    p.add_argument('--instability', action='store_true', help='also report gram conditioning')
    p.add_argument('--fail-on-violation', action='store_true',
                   help='exit with status 5 when any embedding or bound check fails')
    p.add_argument('--output', help='JSON report path')
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser('simulate', help='generate synthetic regression data')
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--d', type=int, required=True)
    p.add_argument('--sigma', type=float, required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--zero-inflation', type=float, default=0.5)
    p.add_argument('--poisson-mean', type=float, default=3.0)
    p.add_argument('--col-mean-sd', type=float, default=5.0)
    p.add_argument('--x-var', type=float, default=4.0)
    p.add_argument('--add-intercept', action='store_true')
    p.add_argument('--format', choices=['csv', 'bin'], default='csv')
    p.add_argument('--header', action='store_true')
    p.add_argument('--beta-output')
    p.add_argument('--output', required=True)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('bench', help='time sketching over a size ladder')
    p.add_argument('--methods', nargs='+', choices=['rad', 'srht', 'cw', 'gram'], default=['cw', 'srht', 'gram'])
    p.add_argument('--sizes', nargs='+', type=int, default=[100000, 200000, 400000])
    p.add_argument('--d', type=int, default=50)
    p.add_argument('--epsilon', type=float, default=0.2)
    p.add_argument('--k', type=int)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--input', help='SKDT file to time instead of the simulated ladder')
    p.add_argument('--trace-memory', action='store_true')
    p.add_argument('--export-format', choices=list(get_config('export_formats')), default='csv')
    p.add_argument('--output', default='bench.csv')
    p.set_defaults(handler=cmd_bench)
    return parser


def run(argv=None):
    """Parse and dispatch; returns the command's result dict (failures included)"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return {'success': False, 'error': 'invalid arguments', 'exit_code': e.code or EXIT_OK}
    try:
        result = args.handler(args)
    except SketchRegError as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        result = error_result(e)
    except OSError as e:
        result = error_result(e)
        result['exit_code'] = EXIT_IO
    if not result.get('success'):
        print(f"❌ {args.command} failed: {result['error']}")
    result.setdefault('exit_code', EXIT_OK)
    return result


def main(argv=None):
    logging.basicConfig(level=get_config('log_level'),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    return run(argv)['exit_code']


if __name__ == '__main__':
    sys.exit(main())
