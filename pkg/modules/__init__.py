# Modules package 