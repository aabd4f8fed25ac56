from scenepose.app import main

main()
