# Sphinx configuration for the fevit API documentation.
# Build with: sphinx-build -b html docs docs/_build

import os
import sys

sys.path.insert(0, os.path.abspath('..'))

project = 'fevit'
copyright = '2026, fevit developers'
author = 'fevit developers'

try:
    from fevit import __version__ as release
except ImportError:
    release = 'unknown'

extensions = ['sphinx.ext.autodoc']
autodoc_member_order = 'bysource'

templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

html_theme = 'classic'
html_static_path = ['_static']
