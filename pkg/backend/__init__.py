# backend/__init__.py
# This makes Python treat the folder as a package
# So "from backend.camera import ..." works.
#
# No re-exports here: config.app_config imports backend.errors,
# and eager imports would make that circular.
