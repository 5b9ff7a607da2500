import os

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'ctr_engine.settings')
os.environ.setdefault('OMP_NUM_THREADS', '1')
os.environ.setdefault('OPENBLAS_NUM_THREADS', '1')
os.environ.setdefault('MKL_NUM_THREADS', '1')

import django  # noqa: E402

django.setup()
