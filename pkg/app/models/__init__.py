"""Data models and schemas"""
