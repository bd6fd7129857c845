"""Bundled data files: keypoint schema, width table, configs."""
