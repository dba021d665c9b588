import importlib
import os
from unittest import mock

from django.test import SimpleTestCase

from srblab.conf import lab_setting, overrides
from srblab.exceptions import DomainError
from srblab.parallel import resolve_threads
from srblab_project import settings as project_settings


class ThreadSettingTests(SimpleTestCase):
    def test_environment_accepts_auto(self):
        before = project_settings.SRBLAB['THREADS']
        with mock.patch.dict(os.environ, {'SRBLAB_THREADS': 'auto'}):
            self.assertEqual(project_settings._env_threads('THREADS', 1), 'auto')
            reloaded = importlib.reload(project_settings)
            self.assertEqual(reloaded.SRBLAB['THREADS'], 'auto')
        importlib.reload(project_settings)
        self.assertEqual(project_settings.SRBLAB['THREADS'], before)

    def test_environment_numbers(self):
        with mock.patch.dict(os.environ, {'SRBLAB_THREADS': ' 4 '}):
            self.assertEqual(project_settings._env_threads('THREADS', 1), 4)
        with mock.patch.dict(os.environ, clear=True):
            self.assertEqual(project_settings._env_threads('THREADS', 1), 1)

    def test_overrides_accept_auto(self):
        with overrides({'THREADS': 'auto'}):
            self.assertEqual(lab_setting('THREADS'), 'auto')
            self.assertGreaterEqual(resolve_threads(), 1)
        with overrides({'THREADS': '3'}):
            self.assertEqual(resolve_threads(), 3)

    def test_bad_thread_count_is_refused(self):
        with self.assertRaises(DomainError):
            with overrides({'THREADS': 'many'}):
                pass
