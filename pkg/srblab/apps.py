from django.apps import AppConfig


class SrblabConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'srblab'
    verbose_name = 'SRB laboratory'
