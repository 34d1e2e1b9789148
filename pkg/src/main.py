import argparse
import logging
import sys

from fractalqos.app import App
from fractalqos.lib.errors import FractalQosError, JobInterrupted
from fractalqos.lib.progress import JobProgress

logger = logging.getLogger("fractalqos")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VIOLATION = 2


def _floats(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def buildParser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fractalqos", description="Fractal-aware QoS traffic simulator")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    parser.add_argument("--workers", type=int, default=None, help="worker processes (default: physical cores)")
    parser.add_argument("--no-progress", action="store_true", help="hide progress bars")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="write a synthetic trace CSV")
    generate.add_argument("output")
    generate.add_argument("--H", type=float, required=True, help="target Hurst index")
    generate.add_argument("--intensity", type=float, default=1.0)
    generate.add_argument("--length", type=int, default=4096)
    generate.add_argument("--depth", type=int, default=0, help="cascade depth (0: monofractal)")
    generate.add_argument("--weight", type=float, default=0.5, help="cascade heavy-side weight")
    generate.add_argument("--sigma-var", type=float, default=None, help="target coefficient of variation")
    generate.add_argument("--burstiness", type=float, default=0.3)
    generate.add_argument("--seed", type=int, default=0)

    analyze = commands.add_parser("analyze", help="fractal signature of a trace CSV")
    analyze.add_argument("trace")
    analyze.add_argument("--window", type=int, default=None, help="one signature per window of this length")
    analyze.add_argument("--q", type=_floats, default=None, help="comma-separated moment orders")
    analyze.add_argument("--method", choices=["fluctuation", "structure"], default="fluctuation")
    analyze.add_argument("--cascade-weight", type=float, default=None,
                         help="also print the analytic h(q) of a cascade with this weight")

    calibrate = commands.add_parser("calibrate", help="build a calibration table")
    calibrate.add_argument("output")
    calibrate.add_argument("--rho", type=_floats, default=None)
    calibrate.add_argument("--H", type=_floats, default=None)
    calibrate.add_argument("--sigma-var", type=_floats, default=None)
    calibrate.add_argument("--loss-target", type=float, default=None)
    calibrate.add_argument("--seeds", type=int, default=None)
    calibrate.add_argument("--length", type=int, default=None)
    calibrate.add_argument("--depth", type=int, default=None)

    for name, text in (("simulate", "run a scenario with its configured methods"),
                       ("compare", "run each method alone and all three together")):
        command = commands.add_parser(name, help=text)
        command.add_argument("scenario")
        command.add_argument("--out", default=None, help="output directory for report and logs")
        command.add_argument("--seeds", type=_ints, default=None, help="comma-separated seeds")
        command.add_argument("--strict", action="store_true", help="exit nonzero on a loss or delay violation")
        command.add_argument("--events", action="store_true", help="also write events.csv")
        command.add_argument("--verify-ledger", action="store_true", help="check queue ledgers every slot")
    return parser


def _printRecords(records):
    for record in records:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items()))


def run(args, app: App) -> int:
    if args.command == "generate":
        from fractalqos.op.traffic import GeneratorSpec, spec_for_signature

        if args.sigma_var is not None:
            spec = spec_for_signature(args.H, args.sigma_var, args.intensity, args.length, args.depth or 10, args.seed)
        else:
            spec = GeneratorSpec(args.H, args.intensity, args.depth, args.weight, args.length, args.seed,
                                 args.burstiness)
        app.generateTrace(spec, args.output)
        return EXIT_OK

    if args.command == "analyze":
        from fractalqos.op.estimators import EstimatorMethod, analytic_cascade_hq

        method = EstimatorMethod(args.method)
        result = app.analyzeTrace(args.trace, args.q, method, args.window)
        signatures = result if isinstance(result, list) else [result]
        _printRecords([{"window": i, **s.asRecord()} for i, s in enumerate(signatures)])
        if args.cascade_weight is not None:
            for q in sorted(signatures[0].hq_samples):
                print(f"analytic h({q:g}) = {analytic_cascade_hq(args.cascade_weight, q):.4f}")
        return EXIT_OK

    if args.command == "calibrate":
        from fractalqos.op.capacity import CalibrationGrid

        default = CalibrationGrid()
        grid = CalibrationGrid(args.rho or default.rho, args.H or default.H, args.sigma_var or default.sigma_var)
        table = app.calibrateTable(grid, args.loss_target, args.seeds, args.length, args.depth, args.output)
        saturated = int(table.saturated.sum())
        print(f"{table.values.size} cells, {saturated} saturated, written to {args.output}")
        return EXIT_OK

    if args.command in ("simulate", "compare"):
        operation = app.simulate if args.command == "simulate" else app.compare
        report = operation(args.scenario, args.out, args.events, args.verify_ledger, args.seeds)
        _printRecords(report.records())
        if args.strict and not report.compliant:
            logger.error("Loss or delay bound violated")
            return EXIT_VIOLATION
        return EXIT_OK
    return EXIT_ERROR


def main(argv=None) -> int:
    args = buildParser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    app = App(args.workers)
    if not args.no_progress:
        app.addObserver(JobProgress())
    try:
        return run(args, app)
    except JobInterrupted as e:
        logger.warning(f"Interrupted: {e}")
        return EXIT_ERROR
    except KeyboardInterrupt:
        app.interrupt()
        logger.warning("Interrupted")
        return EXIT_ERROR
    except FractalQosError as e:
        logger.error(str(e))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
