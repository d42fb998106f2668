"""Plot-data writers and the per-directory run manifest."""
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from django.utils import timezone

from hesslens import __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


def cell(value):
    """Full-precision text for a CSV cell; None becomes an empty cell."""
    if value is None:
        return ''
    if isinstance(value, float):
        return format(value, '.17g')
    return value


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([cell(value) for value in row])
    return path


def write_matrix_csv(path, matrix):
    rows = matrix.tolist()
    return write_csv(path, [f'c{j}' for j in range(len(rows))], rows)


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n')
    return path


def content_hash(source):
    """sha256 of a file, of every file under a directory, or of the text of a synthetic source."""
    digest = hashlib.sha256()
    path = Path(str(source))
    if path.is_file():
        digest.update(path.read_bytes())
    elif path.is_dir():
        for child in sorted(p for p in path.rglob('*') if p.is_file()):
            digest.update(str(child.relative_to(path)).encode())
            digest.update(child.read_bytes())
    else:
        for part in str(source).split(':', 1)[-1].split(','):
            candidate = Path(part)
            digest.update(candidate.read_bytes() if candidate.is_file() else part.encode())
    return digest.hexdigest()


@dataclass
class RunManifest:
    """What produced an output directory: command, resolved config, seed and input hashes."""

    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add_input(self, name, source):
        self.inputs[name] = {'source': str(source), 'sha256': content_hash(source)}

    def add_output(self, path, out_dir):
        self.outputs.append(str(Path(path).relative_to(out_dir)))

    def to_dict(self):
        return {
            'command': self.command,
            'config': self.config,
            'seed': self.seed,
            'version': __version__,
            'inputs': self.inputs,
            'outputs': sorted(self.outputs),
            'summary': self.summary,
            'created': timezone.now().isoformat(),
        }

    def write(self, out_dir):
        path = write_json(Path(out_dir) / MANIFEST_NAME, self.to_dict())
        logger.info('wrote %s manifest with %d outputs to %s', self.command, len(self.outputs), path)
        return path
