"""Display formatting for kmtq output."""
from kmtq.queries import median_by_n, metrics_of


def format_records(records: list) -> str:
    """One line per record: n, rep, metric, error."""
    lines = [f"{'n':>6} {'rep':>4}  {'metric':<20} error"]
    for r in records:
        lines.append(f"{r.n:>6} {r.rep:>4}  {r.metric:<20} {r.error:.6g}")
    return "\n".join(lines)


def format_fit(fit) -> str:
    return (f"{fit.metric} [{fit.correction}]: slope {fit.slope:.4f} ± {fit.stderr:.4f}, "
            f"intercept {fit.intercept:.4f} ({fit.points} points)")


def format_medians(records: list) -> str:
    """Median error per n for every metric."""
    lines = []
    for metric in metrics_of(records):
        lines.append(f"{metric}:")
        for n, m in median_by_n(records, metric).items():
            lines.append(f"  n={n:<6} median {m:.6g}")
    return "\n".join(lines)


def format_check(check) -> str:
    """✓ / ✗ marker, bound name and the numbers behind it."""
    mark = "✓" if check.passed else "✗"
    e = check.exceedance
    return (f"{mark} {check.name} n={check.n} threshold={check.threshold:.4g} "
            f"bound={check.bound:.4g} empirical={e.estimate:.4g} [{e.ci_low:.4g}, {e.ci_high:.4g}]")


def format_summary(config, report) -> str:
    """Human-readable summary.txt."""
    lines = [
        f"kind: {report.kind}",
        f"ladder: {', '.join(str(n) for n in config.ladder)}",
        f"replications: {config.replications}",
        f"p: {config.p}",
        f"arrival: {config.arrival.describe()}"
        + (f" perturbed by {config.perturbation.describe()} (a={config.perturbation_coefficient:g})"
           if config.perturbation is not None else ""),
        f"service: {config.service.describe()}",
        f"c_n: {config.c_rule.rule} (exponent {config.c_rule.exponent:g}, scale {config.c_rule.scale:g})",
        f"seed: {config.seed}",
        f"grid resolution: {config.delta:g} x horizon (horizon = max T + S_n/c_n + 1)",
        "",
    ]
    if report.records:
        lines += ["Median sup-norm errors", format_medians(report.records), ""]
    if report.fits:
        lines += ["Rate fits"] + [f"  {format_fit(f)}" for f in report.fits] + [""]
    if report.checks:
        passed = sum(c.passed for c in report.checks)
        lines += [f"Bound checks ({passed}/{len(report.checks)} pass)"]
        lines += [f"  {format_check(c)}" for c in report.checks] + [""]
    if report.notes:
        lines += ["Notes"] + [f"  {note}" for note in report.notes] + [""]
    lines.append("Acceptance")
    for a in report.acceptance:
        lines.append(f"  {'✓' if a.passed else '✗'} {a.name}: {a.detail}")
    lines.append(f"Overall: {'PASS' if report.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
