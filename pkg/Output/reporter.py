"""
Experiment Reporter Module
Writes run artifacts: JSON and CSV tables, console summaries, image grids
in the target | aux | EMI | PII | GMI layout, and static sweep plots.
"""

import csv
import json
import math
import os
import sys
from pathlib import Path

import cv2
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import ReportError

DP_SWEEP_FIELDS = ['noise_ratio', 'epsilon', 'target_test_acc', 'gmi_acc', 'pii_acc']
POWER_SWEEP_FIELDS = ['axis', 'value', 'predictive_power', 'gmi_acc', 'target_test_acc']

GRID_BACKGROUND = 255


def to_jsonable(value):
    """Recursively convert numpy scalars/arrays and infinities for json.dump."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return config.format_metric(value) if not math.isnan(value) else None
    return value


class ExperimentReporter:
    """
    Formats and saves experiment results.
    """

    def __init__(self, verbose=True):
        self.verbose = verbose

    def _log(self, message):
        if self.verbose:
            print(message)

    def save_json(self, payload, output_path):
        """
        Save a payload as indented JSON with sorted keys.

        Returns:
            str: The written path
        """
        os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
        with open(output_path, 'w') as f:
            json.dump(to_jsonable(payload), f, indent=2, sort_keys=True)
        self._log(f"✓ Saved {output_path}")
        return output_path

    def save_rows_csv(self, rows, fieldnames, output_path):
        """
        Write rows to a fresh CSV file (header always written).

        Floats are rendered with config.format_metric so reruns give
        byte-identical files.
        """
        os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
        with open(output_path, 'w', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(row.get(k)) for k in fieldnames})
        self._log(f"✓ Saved {output_path}")
        return output_path

    def save_results_csv(self, rows, output_path):
        """Results table with config.RESULTS_CSV_FIELDS columns."""
        return self.save_rows_csv(rows, config.RESULTS_CSV_FIELDS, output_path)

    def format_console_output(self, rows, title="MODEL-INVERSION RESULTS"):
        """
        Results table for console display.

        Args:
            rows (list): Dicts keyed by config.RESULTS_CSV_FIELDS
            title (str): Banner title

        Returns:
            str: Formatted table
        """
        lines = ["", "=" * 70, title, "=" * 70, ""]
        if not rows:
            lines.append("  (no results)")
        else:
            lines.append(f"  {'attack':<6} {'setting':<18} {'psnr':>8} {'top1':>7} "
                         f"{'topk':>7} {'feat':>9} {'knn':>9}")
            for row in rows:
                lines.append(
                    f"  {row['attack']:<6} {row['setting']:<18} {_short(row.get('psnr')):>8} "
                    f"{_percent(row['attack_acc_top1']):>7} {_percent(row['attack_acc_topk']):>7} "
                    f"{_short(row['feat_dist']):>9} {_short(row['knn_dist']):>9}"
                )
            lines.append("")
            lines.append(f"  Model: {rows[0]['model']}")
        lines.append("=" * 70)
        lines.append("")
        return "\n".join(lines)

    def build_image_grid(self, entries, columns):
        """
        Tile images into a grid with one row per entry.

        Args:
            entries (list): Dicts column -> HxW or HxWx3 uint8 image
            columns (list): Column order

        Returns:
            np.ndarray: BGR uint8 grid
        """
        cell, pad = config.GRID_CELL_SIZE, config.GRID_PADDING
        rows, cols = len(entries), len(columns)
        grid = np.full((rows * (cell + pad) + pad, cols * (cell + pad) + pad, 3),
                       GRID_BACKGROUND, dtype=np.uint8)
        for r, entry in enumerate(entries):
            for c, column in enumerate(columns):
                image = entry.get(column)
                if image is None:
                    continue
                if image.ndim == 2:
                    image = cv2.cvtColor(image, cv2.COLOR_GRAY2BGR)
                image = cv2.resize(image, (cell, cell), interpolation=cv2.INTER_NEAREST)
                top, left = pad + r * (cell + pad), pad + c * (cell + pad)
                grid[top:top + cell, left:left + cell] = image
        return grid

    def save_image_grid(self, entries, output_path, columns=config.GRID_COLUMNS):
        """
        Save a grid keeping only the columns that some entry provides.

        Returns:
            tuple: (path, omitted column names)
        """
        present = [c for c in columns if any(entry.get(c) is not None for entry in entries)]
        omitted = [c for c in columns if c not in present]
        os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
        cv2.imwrite(output_path, self.build_image_grid(entries, present))
        self._log(f"✓ Saved grid {output_path} ({len(entries)} rows, columns: {', '.join(present)})")
        return output_path, omitted

    def plot_metric_bars(self, rows, output_path):
        """Top-1 / top-k attack accuracy per attack."""
        fig, ax = plt.subplots(figsize=(6, 4))
        attacks = [row['attack'].upper() for row in rows]
        positions = np.arange(len(rows))
        ax.bar(positions - 0.2, [float(row['attack_acc_top1']) for row in rows], 0.4, label='top-1')
        ax.bar(positions + 0.2, [float(row['attack_acc_topk']) for row in rows], 0.4, label='top-k')
        ax.set_xticks(positions)
        ax.set_xticklabels(attacks)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel('attack accuracy')
        ax.legend()
        return self._save_figure(fig, output_path)

    def plot_dp_sweep(self, rows, output_path):
        """Accuracy against epsilon; the x axis is ordered like the rows."""
        fig, ax = plt.subplots(figsize=(6, 4))
        positions = np.arange(len(rows))
        ax.plot(positions, [r['gmi_acc'] for r in rows], 'o-', label='GMI')
        ax.plot(positions, [r['pii_acc'] for r in rows], 's--', label='PII')
        ax.plot(positions, [r['target_test_acc'] for r in rows], '^:', label='target test acc')
        ax.set_xticks(positions)
        ax.set_xticklabels([_epsilon_label(r['epsilon']) for r in rows])
        ax.set_xlabel('epsilon')
        ax.set_ylabel('accuracy')
        ax.set_ylim(0.0, 1.0)
        ax.legend()
        return self._save_figure(fig, output_path)

    def plot_power_sweep(self, rows, output_path, correlation=None):
        """Scatter of GMI accuracy against empirical predictive power."""
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.scatter([r['predictive_power'] for r in rows], [r['gmi_acc'] for r in rows])
        for r in rows:
            ax.annotate(f"{r['axis']}={r['value']}", (r['predictive_power'], r['gmi_acc']),
                        fontsize=8, xytext=(3, 3), textcoords='offset points')
        rho = 'undefined' if correlation is None else f"{correlation:.3f}"
        ax.set_title(f"Spearman rho = {rho}")
        ax.set_xlabel('predictive power (accuracy drop)')
        ax.set_ylabel('GMI attack accuracy')
        return self._save_figure(fig, output_path)

    def _save_figure(self, fig, output_path):
        os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
        fig.tight_layout()
        fig.savefig(output_path, dpi=config.PLOT_DPI)
        plt.close(fig)
        self._log(f"✓ Saved plot {output_path}")
        return output_path


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return config.format_metric(value)
    return value


def _short(value):
    if value in (None, ''):
        return '-'
    value = float(value)
    return 'inf' if math.isinf(value) else f"{value:.2f}"


def _percent(value):
    return f"{float(value) * 100:.1f}%"


def _epsilon_label(epsilon):
    epsilon = float(epsilon)
    return 'inf' if math.isinf(epsilon) else f"{epsilon:.2f}"


def _manifest_dict(manifest):
    if isinstance(manifest, (str, os.PathLike)):
        if not os.path.exists(manifest):
            raise ReportError([str(manifest)])
        with open(manifest) as f:
            return json.load(f)
    if hasattr(manifest, 'to_dict'):
        return manifest.to_dict()
    return dict(manifest)


def _read_image(path):
    image = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ReportError([path])
    return image


def emit_report(manifest, output_dir=None, verbose=True):
    """
    Write grids, metric tables and plots for a finished run.

    Args:
        manifest: RunManifest, its dict form, or a path to manifest.json
        output_dir (str): Destination (default: <run dir>/report)
        verbose (bool): Print progress

    Returns:
        dict: Written file paths by kind, plus omitted grid columns

    Raises:
        ReportError: Incomplete manifest or missing artifacts
    """
    m = _manifest_dict(manifest)
    reporter = ExperimentReporter(verbose=verbose)

    missing = []
    if not m.get('completed'):
        missing.append(f"completed run (manifest stops after {[s['name'] for s in m.get('stages', [])]})")
    reports = m.get('reports', {})
    results_csv = reports.get('results_csv')
    if not results_csv or not os.path.exists(results_csv):
        missing.append(results_csv or 'results_csv')
    metrics_paths = reports.get('metrics', {})
    for attack in m.get('attacks', []):
        path = metrics_paths.get(attack)
        if not path or not os.path.exists(path):
            missing.append(path or f"metrics for {attack}")
    for item in m.get('attack_images', []):
        for path in [item.get('target'), item.get('aux'), *item.get('recon', {}).values()]:
            if path is not None and not os.path.exists(path):
                missing.append(path)
    if missing:
        raise ReportError(missing)

    output_dir = output_dir or os.path.join(m['run_dir'], 'report')
    written = {'grids': [], 'tables': [], 'plots': [], 'omitted_columns': []}

    # Metric tables in fixed attack order
    rows = []
    for attack in [a for a in config.ATTACKS if a in m.get('attacks', [])]:
        with open(metrics_paths[attack]) as f:
            rows.append(json.load(f)['row'])
    written['tables'].append(reporter.save_results_csv(rows, os.path.join(output_dir, 'metrics.csv')))

    # Grids, one per attacked label
    by_label = {}
    for item in m.get('attack_images', []):
        by_label.setdefault(int(item['label']), []).append(item)

    omitted = []
    for label in sorted(by_label):
        entries = []
        for item in sorted(by_label[label], key=lambda i: i['index']):
            entry = {'target': _read_image(item['target'])}
            if item.get('aux'):
                entry['aux'] = _read_image(item['aux'])
            for attack, path in item.get('recon', {}).items():
                entry[attack] = _read_image(path)
            entries.append(entry)
        path, omitted = reporter.save_image_grid(entries, os.path.join(output_dir, f'grid_label_{label}.png'))
        written['grids'].append(path)
    written['omitted_columns'] = omitted

    text = reporter.format_console_output(rows, title=f"MODEL-INVERSION RESULTS: {m.get('name', '')}")
    if omitted:
        text += f"Grid columns omitted (no artifacts in manifest): {', '.join(omitted)}\n"
    text_path = os.path.join(output_dir, 'metrics.txt')
    os.makedirs(output_dir, exist_ok=True)
    with open(text_path, 'w') as f:
        f.write(text)
    written['tables'].append(text_path)
    if verbose:
        print(text)

    if rows:
        written['plots'].append(reporter.plot_metric_bars(rows, os.path.join(output_dir, 'metrics.png')))

    return written
