"""Dense Tracker - Source Package"""
