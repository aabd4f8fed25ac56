from pathlib import Path
from typing import Union
import logging

from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from scenepose.services.evaluation_service import EvalReport

logger = logging.getLogger(__name__)


def _table_style() -> TableStyle:
    return TableStyle([
        ('BACKGROUND', (0, 0), (-1, 0), colors.lightgrey),
        ('GRID', (0, 0), (-1, -1), 0.5, colors.grey),
        ('ALIGN', (2, 1), (-1, -1), 'RIGHT'),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
    ])


def write_pdf_report(report: EvalReport, path: Union[str, Path], title: str = 'Localization report') -> Path:
    """Render an EvalReport as a one-page PDF: per-scene table, averages, accuracies and warnings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    styles = getSampleStyleSheet()
    rows = [['scene', 'name', 'samples', 'median pos. err [m]', 'median ori. err [deg]']]
    rows += [[str(s.scene_id), s.name, str(s.count), f"{s.position_err:.3f}", f"{s.orientation_err:.2f}"]
             for s in report.scenes]
    rows.append(['', 'average', str(report.num_samples),
                 f"{report.average.position_err:.3f}", f"{report.average.orientation_err:.2f}"])

    story = [
        Paragraph(title, styles['Title']),
        Paragraph(f"Split: {report.split}", styles['Normal']),
        Spacer(1, 12),
        Table(rows, style=_table_style()),
        Spacer(1, 12),
        Paragraph(f"Scene classification accuracy: {100 * report.scene_accuracy:.1f}%", styles['Normal']),
        Paragraph(f"Position centroid accuracy: {100 * report.position_centroid_accuracy:.1f}%", styles['Normal']),
        Paragraph(f"Orientation centroid accuracy: {100 * report.orientation_centroid_accuracy:.1f}%",
                  styles['Normal']),
    ]
    for warning in report.warnings:
        story.append(Paragraph(f"Warning: {warning}", styles['Italic']))

    try:
        SimpleDocTemplate(str(path), pagesize=A4).build(story)
    except Exception as e:
        logger.error(f"Error writing PDF report {path}: {str(e)}")
        raise
    logger.info(f"Wrote PDF report to {path}")
    return path
