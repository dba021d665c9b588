# Generated by Django 5.2.7 on 2026-10-18 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='RunManifest',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('subcommand', models.CharField(help_text="Subcommand, e.g. 'srb run'", max_length=64)),
                ('flags', models.JSONField(default=dict, help_text='Full flag map after config layering')),
                ('seed', models.BigIntegerField(default=0, help_text='Seed of the run')),
                ('version', models.CharField(help_text='Laboratory version that produced the run', max_length=32)),
                ('output_dir', models.CharField(blank=True, help_text='Directory holding the outputs', max_length=500)),
                ('input_digests', models.JSONField(default=dict, help_text='sha256 of every input file')),
                ('output_digests', models.JSONField(default=dict, help_text='sha256 of every output file')),
                ('timings', models.JSONField(default=dict, help_text='Step timings in seconds')),
                ('manifest_sha256', models.CharField(help_text='Digest of the manifest file', max_length=64)),
                ('exit_code', models.IntegerField(default=0, help_text='Process exit code')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['subcommand'], name='srblab_runm_subcomm_5d1e2a_idx'), models.Index(fields=['manifest_sha256'], name='srblab_runm_manifes_9b7c41_idx')],
            },
        ),
    ]
