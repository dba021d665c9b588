from django.db import models


class RunManifest(models.Model):
    """
    Ledger row for one command-line run.

    The manifest JSON written next to the outputs is the authoritative record;
    this row makes runs searchable after the output directory is gone.
    """

    subcommand = models.CharField(max_length=64, help_text="Subcommand, e.g. 'srb run'")
    flags = models.JSONField(default=dict, help_text="Full flag map after config layering")
    seed = models.BigIntegerField(default=0, help_text="Seed of the run")
    version = models.CharField(max_length=32, help_text="Laboratory version that produced the run")
    output_dir = models.CharField(max_length=500, blank=True, help_text="Directory holding the outputs")
    input_digests = models.JSONField(default=dict, help_text="sha256 of every input file")
    output_digests = models.JSONField(default=dict, help_text="sha256 of every output file")
    timings = models.JSONField(default=dict, help_text="Step timings in seconds")
    manifest_sha256 = models.CharField(max_length=64, help_text="Digest of the manifest file")
    exit_code = models.IntegerField(default=0, help_text="Process exit code")
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['subcommand']),
            models.Index(fields=['manifest_sha256']),
        ]

    def __str__(self):
        return f"{self.subcommand} seed={self.seed} ({self.manifest_sha256[:12]})"

    @property
    def wall_clock(self):
        """Total of the recorded step timings."""
        return sum(float(value) for value in self.timings.values())

    def matches(self, other_digests):
        """True when ``other_digests`` reproduces every recorded output digest."""
        return all(other_digests.get(name) == digest for name, digest in self.output_digests.items())

    @classmethod
    def from_manifest(cls, manifest, output_dir=''):
        """Build an unsaved row from a manifest dictionary."""
        return cls(
            subcommand=manifest['subcommand'],
            flags=manifest.get('flags', {}),
            seed=manifest.get('seed', 0),
            version=manifest['version'],
            output_dir=str(output_dir),
            input_digests=manifest.get('input_digests', {}),
            output_digests=manifest.get('outputs', {}),
            timings=manifest.get('timings', {}),
            manifest_sha256=manifest.get('manifest_sha256', ''),
        )
